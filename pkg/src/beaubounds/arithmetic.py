"""Continued fractions, convergents and rigid-rotation combinatorics."""

from __future__ import annotations

import csv
import io
import logging
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence, TextIO

import gmpy2
from gmpy2 import mpfr

from .numerics import CircleInterval, PrecisionContext, PrecisionExhausted, reduce_mod1

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ContinuedFraction:
    """Finite prefix ``[a_0, a_1, ..., a_{m-1}]`` of ``rho = 1/(a_0 + 1/(a_1 + ...))``.

    ``terminated`` is set when the quotients were read off a number that
    turned out to be rational at working precision.
    """

    partial_quotients: tuple[int, ...]
    source: str = "explicit"
    terminated: bool = False
    cycle: tuple[int, ...] = field(default=(), compare=False)
    head: tuple[int, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if any(int(a) != a or a < 1 for a in self.partial_quotients):
            raise ValueError(f"partial quotients must be positive integers: {self.partial_quotients}")

    def __len__(self) -> int:
        return len(self.partial_quotients)

    @classmethod
    def explicit(cls, quotients: Sequence[int]) -> "ContinuedFraction":
        return cls(tuple(int(a) for a in quotients), "explicit")

    @classmethod
    def periodic(cls, head: Sequence[int], cycle: Sequence[int], length: int) -> "ContinuedFraction":
        if not cycle:
            raise ValueError("periodic continued fraction needs a non-empty cycle")
        head, cycle = tuple(head), tuple(cycle)
        qs = list(head[:length])
        while len(qs) < length:
            qs.append(cycle[(len(qs) - len(head)) % len(cycle)])
        return cls(tuple(qs), "periodic", cycle=cycle, head=head)

    @classmethod
    def golden(cls, length: int = 64) -> "ContinuedFraction":
        return cls.periodic((), (1,), length)

    @classmethod
    def silver(cls, length: int = 64) -> "ContinuedFraction":
        return cls.periodic((), (2,), length)

    @classmethod
    def parse(cls, text: str, length: int = 64) -> "ContinuedFraction":
        """Parse ``golden``, ``silver`` or ``cf:[a0,a1,...]``.

        A trailing ``...`` repeats the listed quotients periodically.
        """
        text = text.strip()
        if text == "golden":
            return cls.golden(length)
        if text == "silver":
            return cls.silver(length)
        m = re.fullmatch(r"cf:\[(.*)\]", text)
        if not m:
            raise ValueError(f"unrecognised target {text!r}; use golden, silver or cf:[a0,a1,...]")
        items = [s.strip() for s in m.group(1).split(",") if s.strip()]
        repeat = bool(items) and items[-1] in ("...", "…")
        if repeat:
            items = items[:-1]
        quotients = [int(s) for s in items]
        if not quotients:
            raise ValueError("empty continued fraction")
        if repeat:
            return cls.periodic((), quotients, max(length, len(quotients)))
        return cls.explicit(quotients)

    def extended(self, length: int) -> "ContinuedFraction":
        """The same number with at least ``length`` quotients (periodic sources only)."""
        if len(self) >= length:
            return self
        if self.source != "periodic":
            raise ValueError(f"{self.source} continued fraction has only {len(self)} quotients")
        return ContinuedFraction.periodic(self.head, self.cycle, length)

    def label(self) -> str:
        if self.source == "periodic" and not self.head and self.cycle == (1,):
            return "golden"
        if self.source == "periodic" and not self.head and self.cycle == (2,):
            return "silver"
        if self.source == "periodic":
            return "cf:[" + ",".join(map(str, self.head + self.cycle)) + ",...]"
        return "cf:[" + ",".join(map(str, self.partial_quotients)) + "]"

    def value(self, ctx: PrecisionContext) -> mpfr:
        """The number represented, to working precision.

        Periodic sources are extended until the truncation error is below
        ``2**-(bits+8)``; other sources evaluate the finite prefix exactly.
        """
        cf = self
        if self.source == "periodic":
            n = len(self)
            while True:
                cf = self.extended(n)
                q = convergents(cf).q
                if q[-1] * q[-2] > 2 ** (ctx.bits + 8):
                    break
                n *= 2
        table = convergents(cf)
        return ctx.real(Fraction(table.p[-1], table.q[-1]))


@dataclass(frozen=True)
class ConvergentTable:
    """Rows ``n = 0..m`` of numerators ``p_n`` and return times ``q_n``."""

    a: tuple[int, ...]
    p: tuple[int, ...]
    q: tuple[int, ...]

    @property
    def depth(self) -> int:
        return len(self.q) - 1

    def determinant(self, n: int) -> int:
        """``q_n p_{n+1} - q_{n+1} p_n``; equals ``(-1)**n``."""
        return self.q[n] * self.p[n + 1] - self.q[n + 1] * self.p[n]

    def check(self) -> None:
        for n in range(self.depth):
            if self.determinant(n) != (-1) ** n:
                raise AssertionError(f"determinant identity fails at n={n}")
            if n >= 1 and not self.q[n + 1] > self.q[n]:
                raise AssertionError(f"return times not increasing at n={n}")
            if gmpy2.gcd(self.p[n], self.q[n]) != 1:
                raise AssertionError(f"p_{n}/q_{n} not in lowest terms")

    def write_csv(self, out: TextIO, rho: mpfr | None = None) -> None:
        """Columns ``n, a_n, p_n, q_n, sign`` where sign is that of ``q_n rho - p_n``."""
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["n", "a_n", "p_n", "q_n", "sign"])
        for n in range(self.depth + 1):
            a_n = self.a[n] if n < len(self.a) else ""
            if rho is None:
                sign = "+" if n % 2 == 0 else "-"
            else:
                with gmpy2.context(precision=rho.precision):
                    s = self.q[n] * rho - self.p[n]
                sign = "+" if s > 0 else "-" if s < 0 else "0"
            w.writerow([n, a_n, self.p[n], self.q[n], sign])

    def to_csv(self, rho: mpfr | None = None) -> str:
        buf = io.StringIO()
        self.write_csv(buf, rho)
        return buf.getvalue()


def convergents(cf: ContinuedFraction) -> ConvergentTable:
    """Convergent table via ``p_{n+1} = a_n p_n + p_{n-1}``, same for ``q``."""
    a = cf.partial_quotients
    if not a:
        raise ValueError("empty continued fraction")
    p = [0, 1]
    q = [1, a[0]]
    for n in range(1, len(a)):
        p.append(a[n] * p[n] + p[n - 1])
        q.append(a[n] * q[n] + q[n - 1])
    return ConvergentTable(tuple(a), tuple(p), tuple(q))


def _gauss(rho: mpfr, depth: int, bits: int, floor_bits: int) -> tuple[list[int], bool]:
    with PrecisionContext(bits).scope():
        x = mpfr(rho)
        floor = mpfr(2) ** -floor_bits
        quotients: list[int] = []
        while len(quotients) < depth:
            y = 1 / x
            a = int(gmpy2.floor(y))
            x = y - a
            if 1 - x < floor:
                a, x = a + 1, mpfr(0)
            quotients.append(a)
            if x < floor:
                return quotients, True
        return quotients, False


def expand(rho: mpfr, depth: int, ctx: PrecisionContext | None = None) -> ContinuedFraction:
    """First ``depth`` partial quotients of ``rho`` in ``(0, 1)`` by the Gauss map.

    The expansion is repeated at doubled precision and must agree; a
    disagreement raises :class:`PrecisionExhausted`.  A rational ``rho``
    yields a shorter, ``terminated`` expansion instead of an error.
    """
    ctx = ctx or PrecisionContext(max(64, rho.precision))
    ctx.check(rho)
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if not 0 < rho < 1:
        raise ValueError(f"rotation number must lie in (0, 1), got {rho}")
    # Both runs share the rationality floor of the working precision.
    quotients, terminated = _gauss(rho, depth, ctx.bits, ctx.bits // 2)
    check, _ = _gauss(rho, depth, 2 * ctx.bits, ctx.bits // 2)
    common = min(len(quotients), len(check))
    for i in range(common):
        if quotients[i] != check[i]:
            raise PrecisionExhausted(
                f"partial quotient a_{i} unstable under precision doubling "
                f"({quotients[i]} vs {check[i]}) at {ctx.bits} bits"
            )
    if terminated:
        log.info("expansion of %s terminated after %d quotients (rational at %d bits)",
                 rho, len(quotients), ctx.bits)
    return ContinuedFraction(tuple(quotients), "from_real", terminated)


def closest_return_signs(rho: mpfr, depth: int, ctx: PrecisionContext | None = None) -> list[int]:
    """``sign(q_n rho - p_n)`` for ``n = 0..depth``."""
    ctx = ctx or PrecisionContext(max(64, rho.precision))
    cf = expand(rho, max(depth, 1), ctx)
    if cf.terminated and len(cf) < depth:
        raise PrecisionExhausted(f"rho is rational at {ctx.bits} bits; only {len(cf)} quotients")
    table = convergents(cf)
    with ctx.scope():
        return [gmpy2.sign(table.q[n] * rho - table.p[n]) for n in range(depth + 1)]


def rotation_partition_oracle(
    rho: mpfr, n: int, ctx: PrecisionContext | None = None, *, tagged: bool = False
):
    """Atoms of ``P_n(0)`` for the rigid rotation by ``rho``, sorted by left endpoint.

    Endpoints are the fractional parts of ``k * rho``, ``0 <= k < q_n + q_{n+1}``,
    computed by multiplication; no iteration is involved.  With ``tagged``
    each entry is ``(generation, orbit_index, interval)``.
    """
    ctx = ctx or PrecisionContext(max(64, rho.precision))
    cf = expand(rho, n + 2, ctx)
    if len(cf) < n + 1:
        raise PrecisionExhausted(f"rho is rational at {ctx.bits} bits")
    t = convergents(cf)
    qn, qn1 = t.q[n], t.q[n + 1]
    total = qn + qn1
    with ctx.scope():
        points = [(reduce_mod1(k * rho), k) for k in range(total)]
        points.sort()
        for (x0, _), (x1, _) in zip(points, points[1:]):
            if x0 == x1:
                raise PrecisionExhausted("two orbit points collide at working precision")
        atoms = []
        for idx, (x, k_left) in enumerate(points):
            x_next, k_right = points[(idx + 1) % total]
            length = x_next - x if idx + 1 < total else 1 - x + x_next
            gen, orbit = _oracle_tag(n, k_left, k_right, qn, qn1)
            iv = CircleInterval(x, length)
            atoms.append((gen, orbit, iv) if tagged else iv)
    return atoms


def _oracle_tag(n: int, k_left: int, k_right: int, qn: int, qn1: int) -> tuple[int, int]:
    # I_n runs rightwards from 0 when n is even (q_n rho - p_n > 0), leftwards when odd.
    if n % 2 == 0:
        if k_right - k_left == qn:
            return n, k_left
        if k_left - k_right == qn1:
            return n + 1, k_right
    else:
        if k_left - k_right == qn:
            return n, k_right
        if k_right - k_left == qn1:
            return n + 1, k_left
    raise PrecisionExhausted(f"orbit points {k_left}, {k_right} are not combinatorially adjacent")
