"""Combinatorial comparison of rotation numbers and offset tuning by bisection."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

from gmpy2 import mpfr

from .arithmetic import ConvergentTable
from .circlemap import MapSpec, TrigProductMap, build
from .numerics import PrecisionContext, PrecisionExhausted, to_fraction

log = logging.getLogger(__name__)

GUARD_BITS = 32


class TuningError(RuntimeError):
    def __init__(self, message: str, bracket: tuple[mpfr, mpfr] | None = None):
        super().__init__(message)
        self.bracket = bracket


class Outcome(enum.Enum):
    TOO_SMALL = "too_small"
    TOO_LARGE = "too_large"
    CONSISTENT = "consistent"


@dataclass(frozen=True)
class Verdict:
    outcome: Outcome
    n: int

    @property
    def consistent_depth(self) -> int:
        """Largest level whose closest-return sign matched the target."""
        return self.n if self.outcome is Outcome.CONSISTENT else self.n - 1


def default_base(fmap: TrigProductMap) -> mpfr:
    if fmap.critical_positions:
        return fmap.critical_positions[0]
    return fmap.ctx.real(0)


@dataclass(frozen=True)
class CombinatorialComparator:
    """Checks the signs of ``F^{q_n}(x) - x - p_n`` against ``(-1)**n``.

    A zero (periodic orbit through the base point) counts against the
    target on the conservative side: too small at even ``n``, too large at
    odd ``n``.
    """

    target: ConvergentTable
    base: mpfr | None = None

    def __post_init__(self):
        if self.target.depth < 1:
            raise ValueError("target table needs depth >= 1")

    def __call__(self, fmap: TrigProductMap, depth: int) -> Verdict:
        if depth > self.target.depth:
            raise ValueError(f"depth {depth} exceeds target table depth {self.target.depth}")
        base = default_base(fmap) if self.base is None else self.base
        q, p = self.target.q, self.target.p
        with fmap.ctx.scope():
            noise = mpfr(2) ** (GUARD_BITS - fmap.ctx.bits)
            x0 = mpfr(base)
            y = x0
            k = 0
            for n in range(depth + 1):
                while k < q[n]:
                    y = fmap._lift(y)
                    k += 1
                s = y - x0 - p[n]
                if abs(s) <= noise * max(1, abs(y)):
                    s = 0
                if n % 2 == 0 and s <= 0:
                    return Verdict(Outcome.TOO_SMALL, n)
                if n % 2 == 1 and s >= 0:
                    return Verdict(Outcome.TOO_LARGE, n)
        return Verdict(Outcome.CONSISTENT, depth)


def compare(fmap: TrigProductMap, target: ConvergentTable, depth: int, base=None) -> Verdict:
    return CombinatorialComparator(target, base)(fmap, depth)


@dataclass(frozen=True)
class TuneResult:
    a_star: mpfr
    verified_depth: int
    bracket_width: mpfr
    bracket: tuple[mpfr, mpfr]
    steps: int

    def spec(self, template: MapSpec) -> MapSpec:
        return template.with_offset(to_fraction(self.a_star))


def tune(
    template: MapSpec | TrigProductMap,
    target: ConvergentTable,
    depth: int,
    ctx: PrecisionContext | None = None,
    *,
    resolution_bits: int | None = None,
    lookahead: int = 2,
) -> TuneResult:
    """Bisect the offset ``a`` in ``[0, 1]`` until the combinatorics match ``target``.

    Midpoints are compared to depth ``depth + lookahead`` (clipped to the
    table).  Without ``resolution_bits`` the search stops at the first
    midpoint consistent to that depth.  With it, bisection continues until
    the bracket is at most ``2**-resolution_bits``, deepening the comparison
    through the table to break ties; the midpoint of the final bracket is
    returned and must be consistent to ``depth``.
    """
    if isinstance(template, TrigProductMap):
        family = template
        ctx = family.ctx
    else:
        ctx = ctx or PrecisionContext()
        family = build(template.with_offset(0), ctx)
    cmp_depth = min(depth + lookahead, target.depth)
    if cmp_depth < depth:
        raise ValueError(f"target table depth {target.depth} < requested depth {depth}")
    comparator = CombinatorialComparator(target, default_base(family))
    cap = 4 * (resolution_bits if resolution_bits else ctx.bits)
    with ctx.scope():
        lo, hi = mpfr(0), mpfr(1)
        floor = mpfr(2) ** (GUARD_BITS - ctx.bits)
        goal = mpfr(2) ** -resolution_bits if resolution_bits else None
    steps = 0
    while steps < cap:
        with ctx.scope():
            if hi - lo <= floor:
                raise PrecisionExhausted(f"tuning bracket below noise floor at {ctx.bits} bits")
            if goal is not None and hi - lo <= goal:
                break
            mid = (lo + hi) / 2
        steps += 1
        verdict = _decide(comparator, family.with_offset(mid), cmp_depth,
                          target.depth if goal is not None else cmp_depth)
        if verdict.outcome is Outcome.TOO_SMALL:
            lo = mid
        elif verdict.outcome is Outcome.TOO_LARGE:
            hi = mid
        elif goal is None:
            with ctx.scope():
                width = hi - lo
            return TuneResult(mid, verdict.n, width, (lo, hi), steps)
        else:
            raise TuningError(
                f"midpoint consistent through the whole target table (depth {target.depth}) "
                f"before reaching 2^-{resolution_bits}; extend the target",
                (lo, hi),
            )
    else:
        raise TuningError(f"no convergence within {cap} bisection steps", (lo, hi))
    with ctx.scope():
        a_star = (lo + hi) / 2
        width = hi - lo
    verdict = comparator(family.with_offset(a_star), cmp_depth)
    if verdict.consistent_depth < depth:
        raise TuningError(
            f"bracket of width 2^-{resolution_bits} too coarse: midpoint only consistent "
            f"to depth {verdict.consistent_depth} < {depth}",
            (lo, hi),
        )
    return TuneResult(a_star, verdict.consistent_depth, width, (lo, hi), steps)


def _decide(comparator, fmap, depth: int, max_depth: int) -> Verdict:
    verdict = comparator(fmap, depth)
    while verdict.outcome is Outcome.CONSISTENT and depth < max_depth:
        depth += 1
        verdict = comparator(fmap, depth)
    return verdict


def rotation_number_estimate(fmap: TrigProductMap, iterations: int, x=None) -> mpfr:
    """Birkhoff average ``(F^n(x) - x) / n``; error is ``O(1/n)``."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    x0 = default_base(fmap) if x is None else fmap._coerce(x)
    y = fmap.iterate_lift(x0, iterations)
    with fmap.ctx.scope():
        return (y - x0) / iterations
