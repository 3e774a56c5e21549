"""Cross-ratio distortion, Schwarzian of iterates, Koebe and C^1 checks.

Intervals are handled on the lift: an :class:`IntervalPair` is four
increasing reals ``a < b < c < d`` with ``T = [a, d]`` and ``M = [b, c]``.
Images under ``f^j`` are taken endpoint by endpoint, which is exact for a
homeomorphism.
"""

from __future__ import annotations

import bisect
import logging
import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import gmpy2
from gmpy2 import mpfr

from .circlemap import SingularPointError, TrigProductMap, _schwarzian_of
from .numerics import CircleInterval, PrecisionContext, chebyshev_nodes, reduce_mod1
from .partition import (
    DynamicalPartition,
    ReturnStructure,
    build_partition,
    multiplicity,
)

log = logging.getLogger(__name__)

CHAIN_GUARD_BITS = 40


class InjectivityError(ValueError):
    """Image endpoints came out of order."""


@dataclass(frozen=True)
class IntervalPair:
    """``M = [b, c]`` compactly inside ``T = [a, d]`` (lift coordinates)."""

    a: mpfr
    b: mpfr
    c: mpfr
    d: mpfr

    def __post_init__(self):
        if not (self.a < self.b < self.c < self.d):
            raise ValueError("M must be compactly contained in T (need a < b < c < d)")
        if self.d - self.a > 1:
            raise ValueError("T must not be longer than the circle")

    @classmethod
    def from_intervals(cls, M: CircleInterval, T: CircleInterval) -> "IntervalPair":
        start = T.offset_of(M.left)
        if not (0 < start and start + M.length < T.length):
            raise ValueError("M is not compactly contained in T")
        a = T.left
        return cls(a, a + start, a + start + M.length, a + T.length)

    def lengths(self) -> tuple[mpfr, mpfr, mpfr]:
        """``(|L|, |M|, |R|)``."""
        return self.b - self.a, self.c - self.b, self.d - self.c

    def image(self, fmap, j: int = 1) -> "IntervalPair":
        pts = [self.a, self.b, self.c, self.d]
        for _ in range(j):
            pts = [fmap._lift(x) for x in pts]
        if not (pts[0] < pts[1] < pts[2] < pts[3]):
            raise InjectivityError("image endpoints out of order")
        return IntervalPair(*pts)


def _cr(L, M, R):
    return L * R / ((L + M) * (M + R))


def cross_ratio(pair: IntervalPair) -> mpfr:
    """``|L||R| / (|L u M||M u R|)``."""
    with gmpy2.context(precision=pair.a.precision):
        return _cr(*pair.lengths())


@dataclass(frozen=True)
class CrdValue:
    direct: mpfr
    chain: mpfr

    @property
    def value(self) -> mpfr:
        return self.direct


def crd(fmap, j: int, pair: IntervalPair) -> CrdValue:
    """``CrD(f^j; M, T)`` directly and as the product of one-step distortions."""
    if j < 0:
        raise ValueError("j must be >= 0")
    with fmap.ctx.scope():
        start = _cr(*pair.lengths())
        cur, chain = pair, mpfr(1)
        prev = start
        for _ in range(j):
            cur = cur.image(fmap, 1)
            nxt = _cr(*cur.lengths())
            chain *= nxt / prev
            prev = nxt
        return CrdValue(prev / start, chain)


@dataclass(frozen=True, eq=False)
class MobiusMap:
    """``x -> (alpha x + beta) / (gamma x + delta)`` on an interval where it is increasing.

    Exposes the evaluation hooks used by :func:`crd` so that Möbius
    invariance of cross-ratios can be checked.
    """

    alpha: mpfr
    beta: mpfr
    gamma: mpfr
    delta: mpfr
    ctx: PrecisionContext
    critical_positions: tuple = ()
    is_rotation: bool = False

    @classmethod
    def of(cls, alpha, beta, gamma, delta, ctx: PrecisionContext) -> "MobiusMap":
        vals = [ctx.real(v) for v in (alpha, beta, gamma, delta)]
        with ctx.scope():
            if vals[0] * vals[3] - vals[1] * vals[2] <= 0:
                raise ValueError("determinant must be positive")
        return cls(*vals, ctx)

    def pole(self) -> mpfr | None:
        with self.ctx.scope():
            return None if self.gamma == 0 else -self.delta / self.gamma

    def _lift(self, x):
        return (self.alpha * x + self.beta) / (self.gamma * x + self.delta)

    def _derivative(self, x):
        den = self.gamma * x + self.delta
        return (self.alpha * self.delta - self.beta * self.gamma) / (den * den)

    def schwarzian(self, x) -> mpfr:
        return self.ctx.real(0)


def random_pair(rng: random.Random, ctx: PrecisionContext, lo: mpfr, hi: mpfr) -> IntervalPair:
    """Four sorted uniform points in ``(lo, hi)``, drawn as 53-bit fractions of the span."""
    with ctx.scope():
        while True:
            u = sorted(rng.random() for _ in range(4))
            if len(set(u)) == 4 and u[0] > 0:
                pts = [lo + (hi - lo) * mpfr(v) for v in u]
                if pts[0] < pts[1] < pts[2] < pts[3]:
                    return IntervalPair(*pts)


@dataclass(frozen=True)
class CriProduct:
    product: mpfr
    multiplicity: int


def cri_product(fmap, pairs: Sequence[IntervalPair]) -> CriProduct:
    """Product of one-step distortions ``CrD(f; M_i, T_i)`` and the multiplicity of the ``T_i``."""
    with fmap.ctx.scope():
        prod = mpfr(1)
        for p in pairs:
            prod *= crd(fmap, 1, p).direct
        ivs = [CircleInterval(reduce_mod1(p.a), p.d - p.a) for p in pairs]
        tol = mpfr(2) ** (CHAIN_GUARD_BITS - fmap.ctx.bits)
    return CriProduct(prod, multiplicity(ivs, tol))


def log_derivative_variation(fmap: TrigProductMap, lo, hi, grid: int = 256) -> mpfr:
    """Total variation of ``log Df`` over ``[lo, hi]`` sampled on a uniform grid."""
    with fmap.ctx.scope():
        xs = [lo + (hi - lo) * mpfr(i) / grid for i in range(grid + 1)]
        logs = [gmpy2.log(fmap._derivative(x)) for x in xs]
        return sum((abs(u - v) for u, v in zip(logs, logs[1:])), mpfr(0))


# -- Schwarzian of iterates -------------------------------------------------


def _near_critical(fmap, y) -> bool:
    for c, r in zip(fmap.critical_positions, fmap.critical_radii):
        d = reduce_mod1(y - c)
        if min(d, 1 - d) < r:
            return True
    return False


@dataclass(frozen=True)
class SchwarzianSum:
    """``Sf^j(x)`` with its split into terms near (``near``) and away from critical points."""

    total: mpfr
    near: mpfr
    far: mpfr


def schwarzian_iterate(fmap: TrigProductMap, j: int, x) -> SchwarzianSum:
    """``Sf^j(x) = sum_{k<j} Sf(f^k x) (Df^k x)**2``, accumulated left to right."""
    if j < 1:
        raise ValueError("j must be >= 1")
    with fmap.ctx.scope():
        y = fmap._coerce(x)
        near, far, prod = mpfr(0), mpfr(0), mpfr(1)
        for _ in range(j):
            jet = fmap._jet(y)
            term = _schwarzian_of(jet, y) * prod * prod
            if fmap.critical_positions and _near_critical(fmap, y):
                near += term
            else:
                far += term
            prod *= jet.d1
            y = jet.f
        return SchwarzianSum(near + far, near, far)


def _schwarzian_prefix_max(fmap, x, steps: int) -> tuple[mpfr, mpfr]:
    """Largest ``Sf^j(x)`` over ``1 <= j <= steps``, and ``Sf^steps(x)``; inside a scope."""
    y, total, prod = x, mpfr(0), mpfr(1)
    worst = None
    for _ in range(steps):
        jet = fmap._jet(y)
        total += _schwarzian_of(jet, y) * prod * prod
        prod *= jet.d1
        y = jet.f
        if worst is None or total > worst:
            worst = total
    return worst, total


@dataclass(frozen=True)
class NegativeSchwarzianReport:
    """``worst``: largest ``Sf^j`` over grid points of ``I_n`` and ``1 <= j <= q_{n+1}``;
    the ``variant_*`` fields repeat this for ``I_{n+1}`` and ``j <= q_n``."""

    n: int
    grid_size: int
    all_negative: bool
    worst: mpfr
    variant_all_negative: bool
    variant_worst: mpfr
    zero_family: bool = False


def verify_negative_schwarzian(returns: ReturnStructure, n: int, grid_size: int = 64) -> NegativeSchwarzianReport:
    """Sign of ``Sf^j`` on Chebyshev grids of ``I_n`` for every ``j``.

    Every ``j`` is checked: the running chain-rule sum yields all prefixes
    at the cost of a single orbit per grid point.
    """
    fmap = returns.fmap
    ctx = fmap.ctx
    if fmap.is_rotation:
        zero = ctx.real(0)
        return NegativeSchwarzianReport(n, grid_size, False, zero, False, zero, True)
    t = returns.table
    returns.ensure_level(n)
    results = []
    for level, steps in ((n, t.q[n + 1]), (n + 1, t.q[n])):
        with ctx.scope():
            lo = returns.orbit[0]
            hi = lo + returns.displacement(level)
            lo, hi = min(lo, hi), max(lo, hi)
            worst = None
            for x in chebyshev_nodes(lo, hi, grid_size):
                w, _ = _schwarzian_prefix_max(fmap, x, steps)
                worst = w if worst is None else max(worst, w)
        results.append((worst < 0, worst))
    return NegativeSchwarzianReport(n, grid_size, results[0][0], results[0][1],
                                    results[1][0], results[1][1])


def schwarzian_negative_on(fmap: TrigProductMap, lo, hi, k: int, grid_size: int = 64) -> bool:
    """``Sf^j < 0`` at every Chebyshev node of ``[lo, hi]`` for all ``1 <= j <= k``."""
    if fmap.is_rotation:
        return False
    with fmap.ctx.scope():
        for x in chebyshev_nodes(lo, hi, grid_size):
            w, _ = _schwarzian_prefix_max(fmap, x, k)
            if not w < 0:
                return False
    return True


# -- C^1 and Koebe -----------------------------------------------------------


@dataclass(frozen=True)
class C1Bound:
    """``K``: max of ``Df^j(x) |I_n| / |f^j(I_n)|`` over the grid and ``0 <= j <= q_{n+1}``;
    ``return_map_c1``: the ``j = q_{n+1}`` slice, i.e. the sup derivative of the
    affinely rescaled return map on ``I_n``."""

    n: int
    K: mpfr
    return_map_c1: mpfr


def c1_bound_constant(returns: ReturnStructure, n: int, grid_size: int = 32) -> C1Bound:
    fmap = returns.fmap
    t = returns.table
    steps = t.q[n + 1]
    returns.ensure_level(n)
    with fmap.ctx.scope():
        lengths = [abs(returns.displacement(n, j)) for j in range(steps + 1)]
        base_len = lengths[0]
        lo = returns.orbit[0]
        hi = lo + returns.displacement(n)
        lo, hi = min(lo, hi), max(lo, hi)
        K, top = mpfr(1), mpfr(0)
        for x in chebyshev_nodes(lo, hi, grid_size):
            y, prod = x, mpfr(1)
            for j in range(1, steps + 1):
                prod *= fmap._derivative(y)
                y = fmap._lift(y)
                r = prod * base_len / lengths[j]
                if r > K:
                    K = r
            top = max(top, r)
        return C1Bound(n, K, top)


def koebe_bound(tau, ell, c0) -> mpfr:
    """``(1 + 1/tau)**2 * exp(C0 * ell)``."""
    with gmpy2.context(precision=tau.precision if isinstance(tau, mpfr) else 256):
        return (1 + 1 / mpfr(tau)) ** 2 * gmpy2.exp(mpfr(c0) * mpfr(ell))


@dataclass(frozen=True)
class KoebeResult:
    measured: mpfr
    bound: mpfr | None
    space: mpfr
    total_length: mpfr
    preconditions: tuple[str, ...] = ()

    @property
    def checked(self) -> bool:
        return not self.preconditions

    @property
    def ok(self) -> bool:
        return self.checked and self.bound is not None and self.measured <= self.bound


def koebe_check(fmap: TrigProductMap, k: int, T: tuple, M: tuple, tau, ell,
                c0=None, grid_size: int = 32) -> KoebeResult:
    """Distortion of ``f^k`` on ``M`` against the Koebe bound.

    ``T`` and ``M`` are lift intervals ``(lo, hi)``.  Preconditions checked:
    ``f^k`` has no critical point on ``T`` before time ``k``; the images of
    ``T`` have total length at most ``ell``; ``f^k(T)`` contains the
    ``tau``-scaled neighbourhood of ``f^k(M)``.  A violated precondition is
    reported and the bound is left unset.
    """
    with fmap.ctx.scope():
        t_lo, t_hi = (fmap._coerce(v) for v in T)
        m_lo, m_hi = (fmap._coerce(v) for v in M)
        if not t_lo < m_lo < m_hi < t_hi:
            raise ValueError("M must be compactly contained in T")
        issues = []
        a, b, c, d = t_lo, m_lo, m_hi, t_hi
        total = mpfr(0)
        for _ in range(k):
            total += d - a
            if any(_arc_hits(a, d, cp) for cp in fmap.critical_positions):
                issues.append("critical point inside an image of T")
                break
            a, b, c, d = (fmap._lift(v) for v in (a, b, c, d))
        space = min(b - a, d - c) / (c - b)
        if total > fmap._coerce(ell):
            issues.append(f"total length {float(total):.4g} exceeds ell")
        if space < fmap._coerce(tau):
            issues.append(f"space {float(space):.4g} below tau")
        derivs = []
        for x in chebyshev_nodes(m_lo, m_hi, grid_size):
            y, prod = x, mpfr(1)
            for _ in range(k):
                prod *= fmap._derivative(y)
                y = fmap._lift(y)
            derivs.append(prod)
        measured = max(derivs) / min(derivs)
        bound = None
        if not issues and c0 is not None:
            bound = koebe_bound(fmap._coerce(tau), fmap._coerce(ell), fmap._coerce(c0))
    return KoebeResult(measured, bound, space, total, tuple(issues))


def fit_koebe_constant(samples: Iterable[tuple[mpfr, mpfr, mpfr]]) -> float:
    """Smallest ``C0 >= 0`` with ``measured <= (1+1/tau)**2 exp(C0 ell)`` on every sample."""
    best = 0.0
    for measured, tau, ell in samples:
        slack = math.log(float(measured)) - 2 * math.log1p(1 / float(tau))
        if slack > 0:
            best = max(best, slack / float(ell))
    return best


def _arc_hits(lo, hi, c) -> bool:
    """Does the lift interval ``[lo, hi]`` (shorter than 1) contain a lift of ``c``?"""
    return reduce_mod1(c - lo) <= hi - lo


# -- critical neighbourhood constants ---------------------------------------


def critical_step_ratio(fmap: TrigProductMap, lo, hi, grid_size: int = 32) -> mpfr:
    """``max_x Df(x) |J| / |f(J)|`` over a Chebyshev grid of ``J = [lo, hi]``."""
    with fmap.ctx.scope():
        lo, hi = fmap._coerce(lo), fmap._coerce(hi)
        image = fmap._lift(hi) - fmap._lift(lo)
        best = mpfr(0)
        for x in chebyshev_nodes(lo, hi, grid_size):
            best = max(best, fmap._derivative(x) * (hi - lo) / image)
        return best


# -- decomposition of return branches ----------------------------------------


@dataclass(frozen=True)
class DiffeoBlock:
    start: int
    length: int
    measured_distortion: mpfr


@dataclass(frozen=True)
class CriticalStep:
    start: int
    critical_point_index: int
    length: int = 1


@dataclass(frozen=True)
class NegSchwarzBlock:
    start: int
    length: int


@dataclass(frozen=True)
class DecompositionTrace:
    blocks: tuple
    k: int
    n_critical: int
    epsilon: float

    def count(self, kind) -> int:
        return sum(1 for b in self.blocks if isinstance(b, kind))

    @property
    def diffeo_count(self) -> int:
        return self.count(DiffeoBlock)

    @property
    def critical_count(self) -> int:
        return self.count(CriticalStep)

    @property
    def counts_ok(self) -> bool:
        return self.diffeo_count <= 3 * self.n_critical + 1 and self.critical_count <= 3 * self.n_critical

    @property
    def worst_distortion(self) -> mpfr | None:
        vals = [b.measured_distortion for b in self.blocks if isinstance(b, DiffeoBlock)]
        return max(vals) if vals else None

    @property
    def distortion_ok(self) -> bool:
        w = self.worst_distortion
        return w is None or w <= 1 + self.epsilon


class _OrbitArcs:
    """Arcs between orbit points of a return structure, addressed by orbit indices."""

    def __init__(self, returns: ReturnStructure):
        self.orbit = returns.orbit
        self.returns = returns

    def arc(self, left: int, right: int) -> tuple[mpfr, mpfr]:
        """Lift interval from orbit point ``left`` to orbit point ``right`` (inside a scope)."""
        self.returns.ensure(max(left, right) + 1)
        x = self.orbit[left]
        length = reduce_mod1(self.orbit[right] - x)
        return x, x + length


def _star_indices(p: DynamicalPartition, position: int) -> tuple[int, int, int, int]:
    atoms = p.atoms
    prev = atoms[(position - 1) % len(atoms)]
    cur = atoms[position]
    nxt = atoms[(position + 1) % len(atoms)]
    return prev.left_orbit, cur.left_orbit, cur.right_orbit, nxt.right_orbit


def decompose(returns: ReturnStructure, n: int, position: int, k: int, epsilon: float = 0.5,
              coarse_level: int | None = None, grid_size: int = 16) -> DecompositionTrace:
    """Split ``f^k`` on ``D*`` (atom ``position`` of ``P_n`` with its neighbours) into blocks.

    ``J`` is the union of atoms of ``P_{coarse_level}`` covering ``D*``.  Walking
    ``i = 0..k-1``: when ``f^i(J)`` meets no critical point, ``f^s`` up to
    the next time ``f^{i+s}(J)`` does is a diffeomorphic block (its
    distortion on ``f^i(D*)`` is measured); otherwise, if ``f^i(D*)``
    avoids the critical point, ``f^s`` up to the next time ``f^{i+s}(D*)``
    meets one is a negative-Schwarzian block; otherwise the step is a
    single critical step.
    """
    fmap = returns.fmap
    if coarse_level is None:
        coarse_level = max(n // 2, 1)
    if not 0 <= coarse_level < n:
        raise ValueError("coarse level must be below n")
    p = build_partition(returns, n)
    coarse = build_partition(returns, coarse_level)
    A, B, C, D = _star_indices(p, position)
    arcs = _OrbitArcs(returns)
    crit = fmap.critical_positions
    with fmap.ctx.scope():
        # J is the hull of the coarse atoms covering D*, so every f^i(D*) lies in f^i(J).
        lo, hi = arcs.arc(A, D)
        inset = (hi - lo) * mpfr("1e-6")
        JL = coarse.atoms[coarse.locate(reduce_mod1(lo + inset))].left_orbit
        JR = coarse.atoms[coarse.locate(reduce_mod1(hi - inset))].right_orbit

        def hit(lo_idx, hi_idx, i):
            lo, hi = arcs.arc(lo_idx + i, hi_idx + i)
            for idx, c in enumerate(crit):
                if _arc_hits(lo, hi, c):
                    return idx
            return None

        blocks = []
        i = 0
        while i < k:
            if hit(JL, JR, i) is None:
                s = 1
                while i + s < k and hit(JL, JR, i + s) is None:
                    s += 1
                lo, hi = arcs.arc(A + i, D + i)
                blocks.append(DiffeoBlock(i, s, _grid_distortion(fmap, lo, hi, s, grid_size)))
            else:
                c_idx = hit(A, D, i)
                if c_idx is None:
                    s = 1
                    while i + s < k and hit(A, D, i + s) is None:
                        s += 1
                    blocks.append(NegSchwarzBlock(i, s))
                else:
                    s = 1
                    blocks.append(CriticalStep(i, c_idx))
            i += s
    return DecompositionTrace(tuple(blocks), k, fmap.n_critical, epsilon)


def _grid_distortion(fmap, lo, hi, steps: int, grid_size: int) -> mpfr:
    derivs = []
    for x in chebyshev_nodes(lo, hi, grid_size):
        y, prod = x, mpfr(1)
        for _ in range(steps):
            prod *= fmap._derivative(y)
            y = fmap._lift(y)
        derivs.append(prod)
    return max(derivs) / min(derivs)


# -- CrD of return branches over a whole partition ----------------------------


@dataclass(frozen=True)
class ReturnCrd:
    """Largest ``CrD(f^k; D, D*)`` over atoms ``D`` of ``P_n`` and admissible ``k``."""

    n: int
    value: mpfr
    atom: int | None
    k: int | None
    max_admissible: int
    atoms_with_returns: int
    capped_atoms: int = 0


def admissible_steps(p: DynamicalPartition, cap: int | None = None) -> list[int]:
    """Per atom, the largest ``k`` with ``f^j(D)`` inside a single atom for ``1 <= j <= k``."""
    return [k for k, _ in _admissible(p, cap)]


def _admissible(p: DynamicalPartition, cap: int | None):
    """``(k, base)`` per atom, ``base`` being the smaller orbit index of its endpoints."""
    returns = p.returns
    total = len(p)
    cap = cap if cap is not None else default_cap(returns, p.level)
    lefts = p.lefts
    groups: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for s, a in enumerate(p.atoms):
        base = min(a.left_orbit, a.right_orbit)
        groups.setdefault((a.left_orbit - base, a.right_orbit - base), []).append((base, s))
    result: list[tuple[int, int]] = [(0, 0)] * total
    ctx = returns.ctx
    with ctx.scope():
        tol = mpfr(2) ** (CHAIN_GUARD_BITS - ctx.bits)
        half = mpfr(1) / 2
        for (lo_off, hi_off), members in groups.items():
            members.sort()
            last = members[-1][0]
            reach = max(lo_off, hi_off) + 1
            orb = returns.orbit
            # Shifts t at which the arc from orbit point t+lo_off to t+hi_off
            # leaves every atom; scanning stops after the first one past the last base.
            failures: list[int] = []
            for t in range(members[0][0] + 1, last + cap + 1):
                if t + reach >= len(orb):
                    returns.ensure(2 * (t + reach) + 1)
                x = orb[t + lo_off]
                left = reduce_mod1(x)
                length = reduce_mod1(orb[t + hi_off] - x)
                s = (bisect.bisect_right(lefts, left + tol) - 1) % total
                offset = reduce_mod1(left - lefts[s])
                if offset > half:
                    offset -= 1
                if not (offset >= -tol and offset + length <= p.atoms[s].length + tol):
                    failures.append(t)
                    if t > last:
                        break
            for base, s in members:
                i = bisect.bisect_right(failures, base)
                stop = failures[i] if i < len(failures) else base + cap + 1
                result[s] = (min(stop - base - 1, cap), base)
    return result


def default_cap(returns: ReturnStructure, n: int) -> int:
    """``q_{n+2} + q_{n+1}``: past this shift the orbit depends on quotients beyond ``a_{n+2}``."""
    q = returns.table.q
    if n + 2 > returns.table.depth:
        raise ValueError(f"level {n} needs return times up to q_{n + 2}")
    return q[n + 2] + q[n + 1]


def _sparse_table(values: list[mpfr]) -> list[list[int]]:
    table = [list(range(len(values)))]
    span = 1
    while 2 * span <= len(values):
        prev = table[-1]
        row = []
        for i in range(len(values) - 2 * span + 1):
            a, b = prev[i], prev[i + span]
            row.append(a if values[a] >= values[b] else b)
        table.append(row)
        span *= 2
    return table


def _range_argmax(values, table, lo: int, hi: int) -> int:
    """Index of the largest value in ``values[lo:hi+1]``."""
    level = (hi - lo + 1).bit_length() - 1
    a, b = table[level][lo], table[level][hi - (1 << level) + 1]
    return a if values[a] >= values[b] else b


def crd_return_map_max(returns: ReturnStructure, n: int, cap: int | None = None,
                       partition: DynamicalPartition | None = None) -> ReturnCrd:
    """Max of ``CrD(f^k; D, D*)`` over all ``D in P_n`` and admissible ``k >= 1``.

    Atoms whose stars have the same orbit-index offsets form one group; for
    a group the cross-ratio of the shifted star depends only on the shift,
    so the max over ``k`` is a range-max query on one precomputed sequence.
    """
    p = partition if partition is not None else build_partition(returns, n)
    cap = cap if cap is not None else default_cap(returns, n)
    adm = _admissible(p, cap)
    total = len(p)
    groups: dict[tuple[int, int, int, int], list[tuple[int, int, int]]] = {}
    for s in range(total):
        k, _ = adm[s]
        A, B, C, D = _star_indices(p, s)
        base = min(A, B, C, D)
        groups.setdefault((A - base, B - base, C - base, D - base), []).append((s, base, k))
    best, best_atom, best_k = None, None, None
    ctx = returns.ctx
    with ctx.scope():
        best = mpfr(1)
        for (a, b, c, d), members in groups.items():
            members = [m for m in members if m[2] >= 1]
            if not members:
                continue
            t_lo = min(m[1] for m in members)
            t_hi = max(m[1] + m[2] for m in members)
            returns.ensure(t_hi + max(a, b, c, d) + 1)
            orb = returns.orbit
            values = []
            for t in range(t_lo, t_hi + 1):
                xa = orb[t + a]
                L = reduce_mod1(orb[t + b] - xa)
                M = reduce_mod1(orb[t + c] - orb[t + b])
                R = reduce_mod1(orb[t + d] - orb[t + c])
                values.append(_cr(L, M, R))
            table = _sparse_table(values)
            for s, base, k in members:
                i = _range_argmax(values, table, base + 1 - t_lo, base + k - t_lo)
                ratio = values[i] / values[base - t_lo]
                if ratio > best:
                    best, best_atom, best_k = ratio, s, i + t_lo - base
    max_k = max((k for k, _ in adm), default=0)
    with_returns = sum(1 for k, _ in adm if k >= 1)
    capped = sum(1 for k, _ in adm if k >= cap)
    if capped:
        log.warning("level %d: %d atoms still admissible at the cap k = %d", n, capped, cap)
    return ReturnCrd(n, best, best_atom, best_k, max_k, with_returns, capped)


def crd_return_map_direct(returns: ReturnStructure, n: int, position: int, k: int) -> mpfr:
    """``CrD(f^k; D, D*)`` for one atom by iterating the star endpoints (reference path)."""
    p = build_partition(returns, n)
    A, B, C, D = _star_indices(p, position)
    with returns.ctx.scope():
        orb = returns.orbit
        lo = orb[A]
        pts = [lo, lo + reduce_mod1(orb[B] - lo), lo + reduce_mod1(orb[C] - lo), lo + reduce_mod1(orb[D] - lo)]
    pair = IntervalPair(*pts)
    return crd(returns.fmap, k, pair).direct


def theorem_ceiling(n_critical: int, max_order: int) -> float:
    """``(3/2)**(2(3N+1)) * (9 d**2)**(3N)``."""
    N, d = n_critical, max_order
    return 1.5 ** (2 * (3 * N + 1)) * (9 * d * d) ** (3 * N)
