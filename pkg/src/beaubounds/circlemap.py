"""Multicritical circle maps as exact trigonometric-polynomial lifts.

The derivative of the lift is

    DF(x) = Z * prod_i sin(pi (x - c_i)) ** (d_i - 1)

with ``d_i`` odd, so every factor is a trigonometric polynomial.  The
product is expanded exactly: each Fourier coefficient is a finite sum of
rational weights times phases ``exp(-2 pi i theta)`` with rational
``theta``.  Conversion to big floats happens only when a map is built at a
given precision.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from fractions import Fraction

import gmpy2
from gmpy2 import floor, mpfr, sin_cos

from .numerics import PrecisionContext, reduce_mod1, to_fraction

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class SingularPointError(ArithmeticError):
    """Evaluation at (or numerically at) a critical point."""


@dataclass(frozen=True)
class CriticalPoint:
    position: Fraction
    order: int

    def __post_init__(self):
        object.__setattr__(self, "position", to_fraction(self.position) % 1)
        if int(self.order) != self.order or self.order < 3 or self.order % 2 == 0:
            raise ValueError(f"criticality must be an odd integer >= 3, got {self.order!r}")


@dataclass(frozen=True)
class MapSpec:
    """Critical structure ``(c_i, d_i)`` and rotation offset ``a``.

    ``N = 0`` critical points gives the rigid rotation ``x -> x + a``.
    """

    critical_points: tuple[CriticalPoint, ...] = ()
    offset: Fraction = Fraction(0)

    def __post_init__(self):
        pts = tuple(
            cp if isinstance(cp, CriticalPoint) else CriticalPoint(*cp) for cp in self.critical_points
        )
        object.__setattr__(self, "critical_points", pts)
        object.__setattr__(self, "offset", to_fraction(self.offset))
        positions = [cp.position for cp in pts]
        if len(set(positions)) != len(positions):
            raise ValueError(f"coincident critical points: {positions}")

    @classmethod
    def of(cls, *points: tuple, offset=0) -> "MapSpec":
        """``MapSpec.of(("0", 3), ("1/2", 3))``."""
        return cls(tuple(CriticalPoint(Fraction(c), d) for c, d in points), offset)

    @property
    def n_critical(self) -> int:
        return len(self.critical_points)

    @property
    def max_order(self) -> int:
        return max((cp.order for cp in self.critical_points), default=1)

    def with_offset(self, offset) -> "MapSpec":
        return replace(self, offset=to_fraction(offset))

    def to_toml(self) -> str:
        pts = ", ".join(f'{{c = "{_frac_str(cp.position)}", d = {cp.order}}}' for cp in self.critical_points)
        return f'a = "{_frac_str(self.offset)}"\ncritical_points = [{pts}]\n'

    @classmethod
    def from_mapping(cls, data: dict) -> "MapSpec":
        points = tuple(
            CriticalPoint(Fraction(str(item["c"])), int(item["d"]))
            for item in data.get("critical_points", [])
        )
        return cls(points, Fraction(str(data.get("a", "0"))))

    @classmethod
    def from_toml(cls, text: str) -> "MapSpec":
        return cls.from_mapping(tomllib.loads(text))

    @classmethod
    def load(cls, path) -> "MapSpec":
        with open(path, "rb") as fh:
            return cls.from_mapping(tomllib.load(fh))


def _frac_str(x: Fraction) -> str:
    """Exact decimal when the denominator allows it, ``p/q`` otherwise."""
    den, twos, fives = x.denominator, 0, 0
    while den % 2 == 0:
        den, twos = den // 2, twos + 1
    while den % 5 == 0:
        den, fives = den // 5, fives + 1
    if den != 1:
        return f"{x.numerator}/{x.denominator}"
    digits = max(twos, fives)
    scaled = (x * 10**digits).numerator
    sign = "-" if scaled < 0 else ""
    body = str(abs(scaled)).rjust(digits + 1, "0")
    return sign + (f"{body[:-digits]}.{body[-digits:]}" if digits else body)


# Fourier data: k -> {theta: weight}, meaning sum_theta weight * exp(-2 pi i theta).
FourierTerms = dict[int, dict[Fraction, Fraction]]


def sine_power_terms(m: int) -> dict[int, Fraction]:
    """Coefficients of ``sin(pi t) ** (2m)`` in ``exp(2 pi i l t)``.

    ``(-1)**l * C(2m, m+l) / 4**m`` for ``|l| <= m``.
    """
    return {l: Fraction((-1) ** (l % 2) * math.comb(2 * m, m + l), 4**m) for l in range(-m, m + 1)}


def fourier_terms(spec: MapSpec) -> FourierTerms:
    """Exact expansion of ``prod_i sin(pi (x - c_i)) ** (d_i - 1)`` (before normalisation)."""
    terms: FourierTerms = {0: {Fraction(0): Fraction(1)}}
    for cp in spec.critical_points:
        factor = sine_power_terms((cp.order - 1) // 2)
        out: FourierTerms = defaultdict(lambda: defaultdict(Fraction))
        for k, phases in terms.items():
            for l, w in factor.items():
                # exp(2 pi i l (x - c)) = exp(2 pi i l x) * exp(-2 pi i l c)
                for theta, v in phases.items():
                    out[k + l][(theta + l * cp.position) % 1] += v * w
        terms = {k: {t: v for t, v in ph.items() if v} for k, ph in out.items()}
    return {k: ph for k, ph in sorted(terms.items()) if ph}


@dataclass(frozen=True)
class JetValue:
    f: mpfr
    d1: mpfr
    d2: mpfr
    d3: mpfr


@dataclass(frozen=True, eq=False)
class TrigProductMap:
    """Lift ``F(x) = a + x + sum_{k != 0} gamma_k (e^{2 pi i k x} - 1) / (2 pi i k)``.

    Stored in real form: ``DF(x) = 1 + sum_{k=1}^M A_k cos(2 pi k x) + B_k sin(2 pi k x)``.
    """

    spec: MapSpec
    ctx: PrecisionContext
    offset: mpfr
    cos_coefs: tuple[mpfr, ...]
    sin_coefs: tuple[mpfr, ...]
    normalization: mpfr
    critical_positions: tuple[mpfr, ...]
    critical_orders: tuple[int, ...]
    two_pi: mpfr
    critical_radii: tuple[mpfr, ...] = field(default=())

    @property
    def n_critical(self) -> int:
        return len(self.critical_orders)

    @property
    def is_rotation(self) -> bool:
        return not self.critical_orders

    @property
    def order(self) -> int:
        return len(self.cos_coefs)

    def with_offset(self, offset) -> "TrigProductMap":
        """Same critical structure, different rotation parameter (no re-expansion)."""
        a = offset if isinstance(offset, mpfr) and offset.precision == self.ctx.bits else self.ctx.real(to_fraction(offset))
        return replace(self, offset=a, spec=self.spec.with_offset(to_fraction(a)))

    def gamma(self) -> list[tuple[int, mpfr, mpfr]]:
        """Normalised complex Fourier coefficients ``(k, Re gamma_k, Im gamma_k)``, ``k = -M..M``."""
        with self.ctx.scope():
            rows = []
            for k in range(-self.order, self.order + 1):
                if k == 0:
                    rows.append((0, mpfr(1), mpfr(0)))
                    continue
                A, B = self.cos_coefs[abs(k) - 1], self.sin_coefs[abs(k) - 1]
                # A cos + B sin = gamma_k e^{ikx} + conj; gamma_k = (A - iB) / 2 for k > 0
                im = -B / 2 if k > 0 else B / 2
                rows.append((k, A / 2, im))
            return rows

    def gamma_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "re", "im"])
        for k, re_, im in self.gamma():
            w.writerow([k, format(re_, ".40g"), format(im, ".40g")])
        return buf.getvalue()

    # -- evaluation; callers must hold self.ctx.scope() ---------------------

    def _harmonics(self, x: mpfr) -> tuple[list[mpfr], list[mpfr]]:
        # x - floor(x) is exact, so large lifts lose nothing before the trig call.
        s1, c1 = sin_cos(self.two_pi * (x - floor(x)))
        cs, ss = [c1], [s1]
        if self.order > 1:
            two_c1 = 2 * c1
            c_prev, s_prev = 1, 0
            for _ in range(1, self.order):
                c_next = two_c1 * cs[-1] - c_prev
                s_next = two_c1 * ss[-1] - s_prev
                c_prev, s_prev = cs[-1], ss[-1]
                cs.append(c_next)
                ss.append(s_next)
        return cs, ss

    def _lift(self, x: mpfr) -> mpfr:
        order = len(self.cos_coefs)
        if order == 0:
            return x + self.offset
        if order == 1:
            s1, c1 = sin_cos(self.two_pi * (x - floor(x)))
            return self.offset + x + (self.cos_coefs[0] * s1 + self.sin_coefs[0] * (1 - c1)) / self.two_pi
        cs, ss = self._harmonics(x)
        acc = 0
        for k in range(order):
            acc += (self.cos_coefs[k] * ss[k] + self.sin_coefs[k] * (1 - cs[k])) / (k + 1)
        return self.offset + x + acc / self.two_pi

    def _jet(self, x: mpfr) -> JetValue:
        if not self.cos_coefs:
            return JetValue(x + self.offset, mpfr(1), mpfr(0), mpfr(0))
        cs, ss = self._harmonics(x)
        f_acc, d1, d2, d3 = mpfr(0), mpfr(1), mpfr(0), mpfr(0)
        for k in range(self.order):
            A, B = self.cos_coefs[k], self.sin_coefs[k]
            kk = k + 1
            f_acc += (A * ss[k] + B * (1 - cs[k])) / kk
            d1 += A * cs[k] + B * ss[k]
            d2 += kk * (B * cs[k] - A * ss[k])
            d3 -= kk * kk * (A * cs[k] + B * ss[k])
        w = self.two_pi
        return JetValue(self.offset + x + f_acc / w, d1, d2 * w, d3 * w * w)

    def _derivative(self, x: mpfr) -> mpfr:
        if not self.cos_coefs:
            return mpfr(1)
        cs, ss = self._harmonics(x)
        d1 = mpfr(1)
        for k in range(self.order):
            d1 += self.cos_coefs[k] * cs[k] + self.sin_coefs[k] * ss[k]
        return d1

    # -- public, scope-managing API -----------------------------------------

    def lift(self, x) -> mpfr:
        with self.ctx.scope():
            return self._lift(self._coerce(x))

    def derivative(self, x) -> mpfr:
        with self.ctx.scope():
            return self._derivative(self._coerce(x))

    def jet(self, x) -> JetValue:
        with self.ctx.scope():
            return self._jet(self._coerce(x))

    def _coerce(self, x) -> mpfr:
        if isinstance(x, mpfr):
            self.ctx.check(x)
            return x
        return self.ctx.real(x)

    def iterate_lift(self, x, j: int) -> mpfr:
        if j < 0:
            raise ValueError("iteration count must be >= 0")
        with self.ctx.scope():
            y = self._coerce(x)
            for _ in range(j):
                y = self._lift(y)
            return y

    def iterate(self, x, j: int) -> mpfr:
        with self.ctx.scope():
            y = reduce_mod1(self._coerce(x))
            for _ in range(j):
                y = reduce_mod1(self._lift(y))
            return y

    def orbit_lift(self, x, count: int) -> list[mpfr]:
        """``[F^0(x), F^1(x), ..., F^{count-1}(x)]`` on the lift."""
        with self.ctx.scope():
            y = self._coerce(x)
            out = [y]
            for _ in range(count - 1):
                y = self._lift(y)
                out.append(y)
            return out

    def derivative_along_orbit(self, x, j: int) -> tuple[list[mpfr], list[mpfr]]:
        """Factors ``Df(f^k x)`` and running products ``Df^k(x)`` for ``k = 0..j-1``."""
        if j < 1:
            raise ValueError("j must be >= 1")
        with self.ctx.scope():
            y = self._coerce(x)
            factors, products = [], []
            prod = mpfr(1)
            for _ in range(j):
                products.append(prod)
                d = self._derivative(y)
                factors.append(d)
                prod = prod * d
                y = self._lift(y)
            return factors, products

    def schwarzian(self, x) -> mpfr:
        """``D3F/DF - 3/2 (D2F/DF)**2``."""
        with self.ctx.scope():
            jet = self._jet(self._coerce(x))
            return _schwarzian_of(jet, x)

    def nonlinearity(self, x) -> mpfr:
        """``(log DF)' = sum_i (d_i - 1) pi cot(pi (x - c_i))``."""
        with self.ctx.scope():
            x = self._coerce(x)
            pi = self.two_pi / 2
            acc = mpfr(0)
            for c, d in zip(self.critical_positions, self.critical_orders):
                s, co = gmpy2.sin_cos(pi * reduce_mod1(x - c))
                if s == 0:
                    raise SingularPointError(f"x = {x} is a critical point")
                acc += (d - 1) * pi * co / s
            return acc

    def schwarzian_cot(self, x) -> mpfr:
        """Schwarzian from the nonlinearity: ``N' - N**2 / 2``."""
        with self.ctx.scope():
            x = self._coerce(x)
            pi = self.two_pi / 2
            n_val, n_der = mpfr(0), mpfr(0)
            for c, d in zip(self.critical_positions, self.critical_orders):
                s, co = gmpy2.sin_cos(pi * reduce_mod1(x - c))
                if s == 0:
                    raise SingularPointError(f"x = {x} is a critical point")
                n_val += (d - 1) * pi * co / s
                n_der -= (d - 1) * pi * pi / (s * s)
            return n_der - n_val * n_val / 2

    def critical_radius(self, i: int) -> mpfr:
        return self.critical_radii[i]


def _schwarzian_of(jet: JetValue, x) -> mpfr:
    if jet.d1 <= 0:
        raise SingularPointError(f"Df vanishes at x = {x}")
    r = jet.d2 / jet.d1
    return jet.d3 / jet.d1 - 3 * r * r / 2


def build(spec: MapSpec, ctx: PrecisionContext | None = None) -> TrigProductMap:
    """Big-float realisation of ``spec`` at the precision of ``ctx``."""
    ctx = ctx or PrecisionContext()
    terms = fourier_terms(spec)
    with ctx.scope():
        two_pi = 2 * gmpy2.const_pi()

        def coefficient(k: int) -> tuple[mpfr, mpfr]:
            re_, im = mpfr(0), mpfr(0)
            for theta, w in sorted(terms.get(k, {}).items()):
                s, c = _phase(theta, two_pi)
                re_ += _q(w) * c
                im -= _q(w) * s
            return re_, im

        g0, _ = coefficient(0)
        if g0 <= 0:
            raise ValueError("degenerate derivative product")
        order = max((k for k in terms), default=0)
        cos_coefs, sin_coefs = [], []
        for k in range(1, order + 1):
            re_, im = coefficient(k)
            cos_coefs.append(2 * re_ / g0)
            sin_coefs.append(-2 * im / g0)
        fmap = TrigProductMap(
            spec=spec,
            ctx=ctx,
            offset=_q(spec.offset),
            cos_coefs=tuple(cos_coefs),
            sin_coefs=tuple(sin_coefs),
            normalization=1 / g0,
            critical_positions=tuple(_q(cp.position) for cp in spec.critical_points),
            critical_orders=tuple(cp.order for cp in spec.critical_points),
            two_pi=two_pi,
        )
    radii = tuple(power_law_radius(fmap, i) for i in range(fmap.n_critical))
    return replace(fmap, critical_radii=radii)


_QUARTER_TURNS = {0: (0, 1), 1: (1, 0), 2: (0, -1), 3: (-1, 0)}


def _phase(theta: Fraction, two_pi: mpfr) -> tuple[mpfr, mpfr]:
    """``(sin, cos)`` of ``2 pi theta``, exact at quarter turns."""
    if (4 * theta).denominator == 1:
        s, c = _QUARTER_TURNS[int(4 * theta) % 4]
        return mpfr(s), mpfr(c)
    return gmpy2.sin_cos(two_pi * _q(theta))


def _q(x: Fraction) -> mpfr:
    return mpfr(gmpy2.mpq(x.numerator, x.denominator))


def power_law_radius(fmap: TrigProductMap, i: int, ratio: float = 1.5) -> mpfr:
    """Largest dyadic radius ``r`` around critical point ``i`` where the power law is tight.

    On a grid of ``t`` in ``[-r, r]`` the ratio ``DF(c + t) / |t| ** (d - 1)``
    must stay within a factor ``ratio`` (max < ratio * min) and the Schwarzian
    must be negative.  The radius never exceeds a quarter of the distance to
    the nearest other critical point.
    """
    c, d = fmap.critical_positions[i], fmap.critical_orders[i]
    with fmap.ctx.scope():
        others = [abs(reduce_mod1(c - o + mpfr(1) / 2) - mpfr(1) / 2)
                  for j, o in enumerate(fmap.critical_positions) if j != i]
        cap = min([mpfr(1) / 4] + [o / 4 for o in others])
        scales = [mpfr(j) / 16 for j in range(1, 17)] + [mpfr(2) ** -e for e in range(5, 41)]
        r = mpfr(1) / 4
        while r > mpfr(2) ** -40:
            if r <= cap and _power_law_ok(fmap, c, d, r, scales, ratio):
                return r
            r /= 2
    raise ValueError(f"no power-law neighbourhood found for critical point {i}")


def _power_law_ok(fmap, c, d, r, scales, ratio) -> bool:
    values = []
    for s in scales:
        for t in (r * s, -r * s):
            x = c + t
            jet = fmap._jet(x)
            if jet.d1 <= 0 or _schwarzian_of(jet, x) >= 0:
                return False
            values.append(jet.d1 / abs(t) ** (d - 1))
    return max(values) < ratio * min(values)


def arnold(offset="0", order: int = 3, position="0") -> MapSpec:
    """Single critical point: for ``d = 3`` the classical ``x + a - sin(2 pi x) / (2 pi)``."""
    return MapSpec.of((position, order), offset=offset)


def rotation(offset="0") -> MapSpec:
    return MapSpec((), Fraction(offset) if isinstance(offset, str) else to_fraction(offset))
