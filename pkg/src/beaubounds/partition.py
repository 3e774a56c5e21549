"""Dynamical partitions ``P_n(x)`` built from the orbit of a base point.

All lengths come from differences of lifted orbit points,
``|F^{i+q}(x) - F^i(x) - p|``, so no cancellation happens modulo 1.  Atom
endpoints carry their orbit indices: adjacency is decided combinatorially
and then checked against the geometric order.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import gmpy2
from gmpy2 import mpfr

from .arithmetic import ConvergentTable
from .circlemap import TrigProductMap
from .numerics import CircleInterval, PrecisionExhausted, arc_length, circle_distance

GUARD_BITS = 32


class TilingViolation(ValueError):
    """Orbit points of the base do not interleave as the combinatorics require."""


def _frac(x: mpfr) -> mpfr:
    r = x - gmpy2.floor(x)
    return r - 1 if r >= 1 else r


@dataclass(eq=False)
class ReturnStructure:
    """Lifted orbit ``F^k(x)`` of a base point together with its return times."""

    fmap: TrigProductMap
    base: mpfr
    table: ConvergentTable
    orbit: list[mpfr] = field(default_factory=list)

    @classmethod
    def compute(cls, fmap: TrigProductMap, base, table: ConvergentTable, length: int) -> "ReturnStructure":
        rs = cls(fmap, fmap._coerce(base), table)
        rs.ensure(length)
        return rs

    def ensure(self, length: int) -> "ReturnStructure":
        if not self.orbit:
            self.orbit.append(self.base)
        if len(self.orbit) < length:
            with self.fmap.ctx.scope():
                y = self.orbit[-1]
                lift = self.fmap._lift
                for _ in range(length - len(self.orbit)):
                    y = lift(y)
                    self.orbit.append(y)
        return self

    def ensure_level(self, n: int, extra: int = 0) -> "ReturnStructure":
        """Orbit long enough for ``P_n`` and its orientation check."""
        q = self.table.q
        return self.ensure(q[n] + q[n + 1] + max(q[n + 1], q[n]) + 1 + extra)

    @property
    def ctx(self):
        return self.fmap.ctx

    def point(self, k: int) -> mpfr:
        with self.ctx.scope():
            return _frac(self.orbit[k])

    def displacement(self, n: int, start: int = 0) -> mpfr:
        """``F^{start+q_n}(x) - F^{start}(x) - p_n``: signed length of ``f^start(I_n)``."""
        q, p = self.table.q[n], self.table.p[n]
        with self.ctx.scope():
            return self.orbit[start + q] - self.orbit[start] - p

    def interval_length(self, n: int) -> mpfr:
        return abs(self.displacement(n))

    def closest_return_times(self, limit: int) -> list[int]:
        """Times ``k <= limit`` at which ``d(x, f^k x)`` reaches a new minimum."""
        self.ensure(limit + 1)
        times, best = [], None
        with self.ctx.scope():
            x0 = _frac(self.orbit[0])
            for k in range(1, limit + 1):
                d = circle_distance(x0, _frac(self.orbit[k]))
                if best is None or d < best:
                    best = d
                    times.append(k)
        return times

    def check_return_times(self, depth: int) -> None:
        """Measured closest returns must be exactly the distinct ``q_n <= q_depth``."""
        q = self.table.q
        expected = sorted(set(q[: depth + 1]))
        measured = self.closest_return_times(q[depth])
        if measured != expected:
            raise TilingViolation(f"closest returns {measured[:12]} differ from return times {expected[:12]}")


@dataclass(frozen=True)
class Atom:
    generation: int
    index: int
    left_orbit: int
    right_orbit: int
    left: mpfr
    length: mpfr

    @property
    def interval(self) -> CircleInterval:
        return CircleInterval(self.left, self.length)


@dataclass(frozen=True, eq=False)
class DynamicalPartition:
    """``q_{n+1}`` images of ``I_n`` and ``q_n`` images of ``I_{n+1}``, sorted by left endpoint."""

    level: int
    atoms: tuple[Atom, ...]
    returns: ReturnStructure | None = None

    def __len__(self) -> int:
        return len(self.atoms)

    @property
    def lefts(self) -> list[mpfr]:
        return [a.left for a in self.atoms]

    def lengths(self) -> list[mpfr]:
        return [a.length for a in self.atoms]

    def count(self, generation: int) -> int:
        return sum(1 for a in self.atoms if a.generation == generation)

    def locate(self, x: mpfr) -> int:
        """Position of the atom whose closed arc contains ``x`` (ties go right)."""
        lefts = self.__dict__.get("_lefts")
        if lefts is None:
            lefts = self.lefts
            object.__setattr__(self, "_lefts", lefts)
        s = bisect.bisect_right(lefts, x) - 1
        return s % len(self.atoms)

    def atom(self, generation: int, index: int) -> tuple[int, Atom]:
        for s, a in enumerate(self.atoms):
            if a.generation == generation and a.index == index:
                return s, a
        raise KeyError((generation, index))

    def orbit_position(self) -> dict[int, int]:
        """Map from orbit index of a left endpoint to atom position."""
        return {a.left_orbit: s for s, a in enumerate(self.atoms)}

    def adjacent_ratio_max(self) -> mpfr:
        atoms = self.atoms
        best = None
        with gmpy2.context(precision=atoms[0].length.precision):
            for s in range(len(atoms)):
                a, b = atoms[s].length, atoms[(s + 1) % len(atoms)].length
                r = a / b if a > b else b / a
                if best is None or r > best:
                    best = r
        return best


def build_partition(returns: ReturnStructure, n: int) -> DynamicalPartition:
    """``P_n`` of the base point of ``returns``.

    ``I_n`` runs from the base to ``f^{q_n}`` on the side given by the sign of
    the lifted displacement; that side contains ``f^{q_n+q_{n+1}}`` (checked).
    Raises :class:`TilingViolation` when the atoms fail to tile the circle
    within ``2**-(bits-32)``.
    """
    t = returns.table
    if n + 1 > t.depth:
        raise ValueError(f"level {n} needs return times up to q_{n + 1}; table depth {t.depth}")
    returns.ensure_level(n)
    qn, qn1, pn, pn1 = t.q[n], t.q[n + 1], t.p[n], t.p[n + 1]
    orb = returns.orbit
    ctx = returns.ctx
    with ctx.scope():
        tol = mpfr(2) ** (GUARD_BITS - ctx.bits)
        s_n = orb[qn] - orb[0] - pn
        s_n1 = orb[qn1] - orb[0] - pn1
        if s_n == 0 or s_n1 == 0 or (s_n > 0) == (s_n1 > 0):
            raise TilingViolation(f"I_{n} and I_{n + 1} are not on opposite sides of the base")
        # f^{q_n + q_{n+1}}(x) lies inside I_n.
        inner = orb[qn + qn1] - orb[0] - pn - pn1
        if not (inner > 0) == (s_n > 0) or abs(inner) >= abs(s_n):
            raise TilingViolation(f"f^(q_{n}+q_{n + 1}) of the base is not inside I_{n}")
        atoms = []
        for gen, q, p, count, s in ((n, qn, pn, qn1, s_n), (n + 1, qn1, pn1, qn, s_n1)):
            positive = s > 0
            for i in range(count):
                d = orb[i + q] - orb[i] - p
                if (d > 0) != positive or d == 0:
                    raise TilingViolation(f"image {i} of I_{gen} reverses orientation")
                if positive:
                    atoms.append(Atom(gen, i, i, i + q, _frac(orb[i]), d))
                else:
                    atoms.append(Atom(gen, i, i + q, i, _frac(orb[i + q]), -d))
        atoms.sort(key=lambda a: a.left)
        total = len(atoms)
        measure = mpfr(0)
        for s, a in enumerate(atoms):
            nxt = atoms[(s + 1) % total]
            if a.right_orbit != nxt.left_orbit:
                raise TilingViolation(
                    f"level {n}: atom ending at orbit point {a.right_orbit} is followed by one "
                    f"starting at {nxt.left_orbit}"
                )
            gap = arc_length(a.left + a.length, nxt.left)
            if min(gap, 1 - gap) > tol:
                raise TilingViolation(f"level {n}: tiling defect {gap} exceeds {tol}")
            measure += a.length
        if abs(measure - 1) > tol:
            raise TilingViolation(f"level {n}: total length {measure} differs from 1")
    return DynamicalPartition(n, tuple(atoms), returns)


@dataclass(frozen=True)
class PartitionReport:
    max_overlap: mpfr
    max_gap: mpfr
    measure_defect: mpfr
    refinement_defect: mpfr | None
    nonstrict_atoms: int | None
    tolerance: mpfr

    @property
    def ok(self) -> bool:
        worst = [self.max_overlap, self.max_gap, self.measure_defect]
        if self.refinement_defect is not None:
            worst.append(self.refinement_defect)
        return max(worst) <= self.tolerance


def validate_partition(p: DynamicalPartition, coarser: DynamicalPartition | None = None,
                       tolerance: mpfr | None = None) -> PartitionReport:
    """Worst interior overlap, gap, measure and refinement defects of ``p``.

    Only the stored intervals are used, so an atom moved by hand is caught.
    ``nonstrict_atoms`` counts atoms of ``coarser`` that are not subdivided.
    """
    prec = p.atoms[0].length.precision
    with gmpy2.context(precision=prec):
        tol = tolerance if tolerance is not None else mpfr(2) ** (GUARD_BITS - prec)
        atoms = sorted(p.atoms, key=lambda a: a.left)
        overlap, gap, measure = mpfr(0), mpfr(0), mpfr(0)
        for s, a in enumerate(atoms):
            nxt = atoms[(s + 1) % len(atoms)]
            d = arc_length(a.left + a.length, nxt.left)
            if d > mpfr(1) / 2:
                overlap = max(overlap, 1 - d)
            else:
                gap = max(gap, d)
            measure += a.length
        refinement, nonstrict = None, None
        if coarser is not None:
            refinement = mpfr(0)
            per_coarse = [0] * len(coarser)
            for a in atoms:
                mid = _frac(a.left + a.length / 2)
                s = coarser.locate(mid)
                c = coarser.atoms[s]
                start = arc_length(c.left, a.left)
                if start > mpfr(1) / 2:
                    start -= 1
                refinement = max(refinement, -start, start + a.length - c.length)
                per_coarse[s] += 1
            nonstrict = sum(1 for k in per_coarse if k == 1)
        return PartitionReport(overlap, gap, abs(measure - 1), refinement, nonstrict, tol)


@dataclass(frozen=True)
class BoundsRow:
    """Measured real-bounds constants of one level.

    ``B``: worst ratio of adjacent atoms in ``P_n``; ``mu``: worst
    ``|D|/|D'|`` over ``D in P_{n+2}`` inside ``D' in P_n``; ``scaling``:
    ``|I_{n+1}(c_i)| / |I_n(c_i)|`` for each critical point (or the base).
    """

    n: int
    B: mpfr
    mu: mpfr
    scaling: tuple[mpfr, ...]


def refinement_ratio_max(fine: DynamicalPartition, coarse: DynamicalPartition) -> mpfr:
    best = None
    with gmpy2.context(precision=fine.atoms[0].length.precision):
        for a in fine.atoms:
            c = coarse.atoms[coarse.locate(_frac(a.left + a.length / 2))]
            r = a.length / c.length
            if best is None or r > best:
                best = r
    return best


def bounds_row(returns: Sequence[ReturnStructure], n: int,
               partitions: dict[int, DynamicalPartition] | None = None) -> BoundsRow:
    """Bounds at level ``n``; ``returns[0]`` is based at ``c_0``, one entry per critical point."""
    partitions = partitions if partitions is not None else {}
    for level in (n, n + 2):
        if level not in partitions:
            partitions[level] = build_partition(returns[0], level)
    pn, pn2 = partitions[n], partitions[n + 2]
    for r in returns:
        r.ensure(r.table.q[n + 1] + 1)
    with returns[0].ctx.scope():
        scaling = tuple(r.interval_length(n + 1) / r.interval_length(n) for r in returns)
    return BoundsRow(n, pn.adjacent_ratio_max(), refinement_ratio_max(pn2, pn), scaling)


def multiplicity(intervals: Iterable[CircleInterval], tol: mpfr | int = 0) -> int:
    """Largest number of interval interiors covering a single point of the circle.

    Each interval is shrunk by ``tol`` at both ends first, so atoms that
    merely share endpoints up to rounding count once.
    """
    events: list[tuple[mpfr, int]] = []
    for iv in intervals:
        start = iv.left + tol
        end = iv.left + iv.length - tol
        if end <= start:
            continue
        if start >= 1:
            start, end = start - 1, end - 1
        if end > 1:
            events += [(start, 1), (mpfr(1), -1), (mpfr(0), 1), (end - 1, -1)]
        else:
            events += [(start, 1), (end, -1)]
    # Ends sort before starts at equal coordinates: interiors are open.
    events.sort(key=lambda e: (e[0], e[1]))
    depth = best = 0
    for _, delta in events:
        depth += delta
        best = max(best, depth)
    return best


def wing_lengths(returns: ReturnStructure, n: int, j: int) -> tuple[mpfr, mpfr, mpfr]:
    """``(|L_n^j|, |I_n^j|, |R_n^j|)`` with ``L_n = I_{n+1}`` and ``R_n = f^{q_n}(I_n)``."""
    t = returns.table
    qn, qn1 = t.q[n], t.q[n + 1]
    if not 0 <= j <= qn1:
        raise ValueError(f"j = {j} outside 0..q_{n + 1} = {qn1}")
    returns.ensure(j + max(qn1, 2 * qn) + 1)
    with returns.ctx.scope():
        return (abs(returns.displacement(n + 1, j)),
                abs(returns.displacement(n, j)),
                abs(returns.displacement(n, j + qn)))


def wing_spaces(returns: ReturnStructure, n: int, j: int) -> tuple[mpfr, mpfr]:
    """``(|L_n^j| / |I_n^j|, |R_n^j| / |I_n^j|)``."""
    left, mid, right = wing_lengths(returns, n, j)
    with returns.ctx.scope():
        return left / mid, right / mid


def wing_interval(returns: ReturnStructure, n: int, j: int) -> CircleInterval:
    """``f^j(T_n)`` with ``T_n = L_n u I_n u R_n``."""
    left, mid, right = wing_lengths(returns, n, j)
    qn, qn1 = returns.table.q[n], returns.table.q[n + 1]
    with returns.ctx.scope():
        if returns.displacement(n) > 0:
            start = returns.orbit[j + qn1]
        else:
            start = returns.orbit[j + 2 * qn]
        return CircleInterval(_frac(start), left + mid + right)


def shifted(p: DynamicalPartition, position: int, delta: mpfr) -> DynamicalPartition:
    """Copy of ``p`` with one atom moved by ``delta`` (fault injection for tests)."""
    atoms = list(p.atoms)
    a = atoms[position]
    with gmpy2.context(precision=a.left.precision):
        atoms[position] = replace(a, left=_frac(a.left + delta))
    return DynamicalPartition(p.level, tuple(atoms), p.returns)


def require_precision(returns: ReturnStructure, n: int) -> None:
    """Raise when the smallest atom of level ``n`` is at the noise floor."""
    with returns.ctx.scope():
        floor = mpfr(2) ** (GUARD_BITS - returns.ctx.bits)
        if returns.interval_length(n + 1) <= floor:
            raise PrecisionExhausted(f"|I_{n + 1}| below 2^-(bits-32)")
