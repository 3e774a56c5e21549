"""Numerical laboratory for real and beau bounds of multicritical circle maps."""

from .numerics import PrecisionContext, CircleInterval, reduce_mod1, circle_distance
from .arithmetic import ContinuedFraction, ConvergentTable, convergents, expand
from .circlemap import MapSpec, TrigProductMap, build

__version__ = "0.1.0"
