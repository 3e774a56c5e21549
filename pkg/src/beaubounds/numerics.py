"""High-precision scalars and circle geometry.

Every real number in the package is a :class:`gmpy2.mpfr` created under a
:class:`PrecisionContext`.  The circle is ``R/Z`` with total length 1.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, Union

import gmpy2
from gmpy2 import mpfr

Real = Union[mpfr, int, str, Fraction]

DEFAULT_BITS = 256


class PrecisionError(ArithmeticError):
    """Base class for numerical failures tied to working precision."""


class MixedPrecisionError(PrecisionError):
    pass


class PrecisionExhausted(PrecisionError):
    """A quantity fell below the noise floor of the working precision."""


@dataclass(frozen=True)
class PrecisionContext:
    """Significand precision for every scalar of one computation.

    Rounding is always to nearest (ties to even).  Arithmetic must run
    inside :meth:`scope`; gmpy2 contexts are thread local, so scopes on
    different threads do not interfere.
    """

    bits: int = DEFAULT_BITS

    def __post_init__(self):
        if not isinstance(self.bits, int) or self.bits < 64:
            raise ValueError(f"precision must be an integer >= 64 bits, got {self.bits!r}")

    @contextlib.contextmanager
    def scope(self) -> Iterator[gmpy2.context]:
        ctx = gmpy2.context(
            precision=self.bits,
            round=gmpy2.RoundToNearest,
            trap_invalid=True,
        )
        with ctx:
            yield ctx

    def real(self, value: Real) -> mpfr:
        """Convert ``value`` to a scalar of exactly this precision."""
        if isinstance(value, float):
            raise TypeError("floats are not accepted; pass a string, int, Fraction or mpfr")
        with self.scope():
            if isinstance(value, Fraction):
                return mpfr(gmpy2.mpq(value.numerator, value.denominator))
            if isinstance(value, str):
                return parse_scalar(value, self) if "@" in value else mpfr(value)
            return mpfr(value)

    def check(self, *values: mpfr) -> None:
        for v in values:
            if isinstance(v, mpfr) and v.precision != self.bits:
                raise MixedPrecisionError(
                    f"scalar carries {v.precision} bits inside a {self.bits}-bit context"
                )

    def tolerance(self, guard: int) -> mpfr:
        """``2**-(bits - guard)``."""
        with self.scope():
            return mpfr(2) ** (guard - self.bits)

    def doubled(self) -> "PrecisionContext":
        return PrecisionContext(2 * self.bits)


def auto_bits(n_max: int) -> int:
    """Precision needed to resolve dynamical partitions down to level ``n_max``."""
    return max(DEFAULT_BITS, 64 + 24 * n_max)


@contextlib.contextmanager
def _matching(x) -> Iterator[None]:
    """Run at the precision of ``x`` when called outside a matching scope."""
    if isinstance(x, mpfr) and gmpy2.get_context().precision != x.precision:
        with PrecisionContext(max(64, x.precision)).scope():
            yield
    else:
        yield


def reduce_mod1(x: mpfr) -> mpfr:
    """Fractional part of ``x``, in ``[0, 1)``."""
    if not gmpy2.is_finite(x):
        raise ValueError(f"cannot reduce non-finite value {x}")
    with _matching(x):
        r = x - gmpy2.floor(x)
        # x = -tiny rounds to 1 - tiny = 1.0 at finite precision.
        if r >= 1:
            r -= 1
        return r


def circle_distance(a: mpfr, b: mpfr) -> mpfr:
    with _matching(a):
        d = abs(reduce_mod1(a) - reduce_mod1(b))
        return min(d, 1 - d)


def arc_length(a: mpfr, b: mpfr) -> mpfr:
    """Length of the positively oriented arc from ``a`` to ``b``."""
    with _matching(a):
        return reduce_mod1(b - a)


@dataclass(frozen=True)
class CircleInterval:
    """Positively oriented arc starting at ``left`` with the given length."""

    left: mpfr
    length: mpfr

    def __post_init__(self):
        if not 0 <= self.left < 1:
            raise ValueError(f"left endpoint {self.left} outside [0, 1)")
        if not 0 < self.length < 1:
            raise ValueError(f"interval length {self.length} outside (0, 1)")

    @classmethod
    def from_endpoints(cls, left: mpfr, right: mpfr) -> "CircleInterval":
        return cls(reduce_mod1(left), arc_length(left, right))

    @property
    def right(self) -> mpfr:
        return reduce_mod1(self.left + self.length)

    def offset_of(self, x: mpfr) -> mpfr:
        """Position of ``x`` measured from ``left`` along the arc, in ``[0, 1)``."""
        return arc_length(self.left, x)

    def contains(self, x: mpfr, tol: mpfr | int = 0) -> bool:
        """Closed containment, widened by ``tol`` at both ends."""
        t = self.offset_of(x)
        return t <= self.length + tol or t >= 1 - tol

    def contains_interval(self, other: "CircleInterval", tol: mpfr | int = 0) -> bool:
        start = self.offset_of(other.left)
        if start >= 1 - tol:
            start -= 1
        return start >= -tol and start + other.length <= self.length + tol


def digits_for(bits: int) -> int:
    return math.ceil(bits * math.log10(2)) + 2


def format_scalar(x: mpfr) -> str:
    """Decimal string tagged with its precision, e.g. ``0.618...@256``."""
    return f"{format(x, '.%dg' % digits_for(x.precision))}@{x.precision}"


def parse_scalar(text: str, ctx: PrecisionContext | None = None) -> mpfr:
    body, _, tag = text.strip().partition("@")
    bits = int(tag) if tag else (ctx.bits if ctx else DEFAULT_BITS)
    if ctx is not None and bits != ctx.bits:
        raise MixedPrecisionError(f"scalar tagged @{bits} read into a {ctx.bits}-bit context")
    with PrecisionContext(bits).scope():
        return mpfr(body)


def to_fraction(x: mpfr | Fraction | int | str) -> Fraction:
    """Exact rational value of a scalar (binary floats are dyadic rationals)."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (int, str)):
        return Fraction(x)
    num, den = x.as_integer_ratio()
    return Fraction(int(num), int(den))


def chebyshev_nodes(left: mpfr, right: mpfr, count: int) -> list[mpfr]:
    """Chebyshev points of the first kind strictly inside ``(left, right)``."""
    mid = (left + right) / 2
    half = (right - left) / 2
    pi = gmpy2.const_pi()
    return [mid - half * gmpy2.cos(pi * (2 * i + 1) / (2 * count)) for i in range(count)]
