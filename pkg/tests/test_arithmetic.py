import bisect
import math
from fractions import Fraction

import gmpy2
import pytest
from gmpy2 import mpfr
from hypothesis import given
from hypothesis import strategies as st

from beaubounds.arithmetic import (
    ContinuedFraction,
    closest_return_signs,
    convergents,
    expand,
    rotation_partition_oracle,
)
from beaubounds.numerics import PrecisionContext, PrecisionExhausted

CTX = PrecisionContext(256)


def golden(ctx=CTX):
    with ctx.scope():
        return (gmpy2.sqrt(mpfr(5)) - 1) / 2


def silver(ctx=CTX):
    with ctx.scope():
        return gmpy2.sqrt(mpfr(2)) - 1


def gauss_exact(x: Fraction, depth: int) -> list[int]:
    """Gauss map on exact rationals: the independent oracle."""
    out = []
    while x and len(out) < depth:
        y = 1 / x
        a = math.floor(y)
        out.append(a)
        x = y - a
    return out


def test_expand_golden_and_silver():
    assert expand(golden(), 10).partial_quotients == (1,) * 10
    assert expand(silver(), 6).partial_quotients == (2,) * 6


def test_expand_rational_terminates():
    cf = expand(CTX.real("0.3"), 3)
    assert cf.terminated
    assert list(cf.partial_quotients) == gauss_exact(Fraction(3, 10), 3) == [3, 3]


@given(st.fractions(min_value=Fraction(1, 500), max_value=Fraction(499, 500), max_denominator=500))
def test_expand_matches_exact_gauss_map_on_rationals(x):
    cf = expand(CTX.real(x), 40)
    assert cf.terminated
    assert list(cf.partial_quotients) == gauss_exact(x, 40)


def test_expand_detects_unstable_quotients():
    # The Gauss map doubles rounding errors of golden about every 1.4 steps.
    low = PrecisionContext(64)
    with pytest.raises(PrecisionExhausted):
        expand(golden(low), 60, low)


def fibonacci(n):
    a, b = 0, 1
    for _ in range(n):
        a, b = b, a + b
    return a


def pell(n):
    a, b = 0, 1
    for _ in range(n):
        a, b = b, 2 * b + a
    return a


def test_convergents_golden_fibonacci_oracle():
    t = convergents(ContinuedFraction.golden(5))
    assert t.q[:5] == (1, 1, 2, 3, 5)
    assert t.p[:5] == (0, 1, 1, 2, 3)
    t = convergents(ContinuedFraction.golden(40))
    assert all(t.q[n] == fibonacci(n + 1) and t.p[n] == fibonacci(n) for n in range(41))


def test_convergents_silver_pell_oracle():
    t = convergents(ContinuedFraction.silver(5))
    assert t.q[:5] == (1, 2, 5, 12, 29)
    t = convergents(ContinuedFraction.silver(40))
    assert all(t.q[n] == pell(n + 1) and t.p[n] == pell(n) for n in range(41))


def test_first_determinant_is_one():
    for cf in (ContinuedFraction.golden(3), ContinuedFraction.explicit([7, 3, 15, 1])):
        assert convergents(cf).determinant(0) == 1


@given(st.lists(st.integers(1, 10**6), min_size=1, max_size=60))
def test_table_invariants(quotients):
    t = convergents(ContinuedFraction.explicit(quotients))
    t.check()
    for n in range(t.depth):
        assert t.q[n] * t.p[n + 1] - t.q[n + 1] * t.p[n] == (-1) ** n
        assert math.gcd(t.p[n], t.q[n]) == 1


@given(st.lists(st.integers(1, 4), min_size=4, max_size=12))
def test_best_approximation_errors_decrease(cycle):
    cf = ContinuedFraction.periodic((), cycle, 24)
    rho = cf.value(CTX)
    t = convergents(cf)
    with CTX.scope():
        errs = [abs(t.q[n] * rho - t.p[n]) for n in range(20)]
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_closest_return_signs_golden_identity():
    signs = closest_return_signs(golden(), 4)
    assert signs == [1, -1, 1, -1, 1]
    # Independent oracle: q_n g - p_n = (-1)^n g^(n+1).
    t = convergents(ContinuedFraction.golden(30))
    g = golden()
    with CTX.scope():
        for n in range(25):
            lhs = t.q[n] * g - t.p[n]
            assert abs(lhs - (-1) ** n * g ** (n + 1)) < CTX.tolerance(40)


def test_closest_return_signs_silver():
    assert closest_return_signs(silver(), 3) == [1, -1, 1, -1]


def test_parse_and_label():
    assert ContinuedFraction.parse("golden").label() == "golden"
    assert ContinuedFraction.parse("silver").label() == "silver"
    cf = ContinuedFraction.parse("cf:[1,2,...]", 6)
    assert cf.partial_quotients == (1, 2, 1, 2, 1, 2)
    assert cf.label() == "cf:[1,2,...]"
    assert ContinuedFraction.parse("cf:[3,1,4]").partial_quotients == (3, 1, 4)
    with pytest.raises(ValueError):
        ContinuedFraction.parse("bronze")
    with pytest.raises(ValueError):
        ContinuedFraction.explicit([1, 0, 2])


def test_value_of_periodic_fraction():
    assert abs(ContinuedFraction.golden(8).value(CTX) - golden()) < CTX.tolerance(4)
    assert abs(ContinuedFraction.silver(8).value(CTX) - silver()) < CTX.tolerance(4)


def test_csv_export():
    t = convergents(ContinuedFraction.golden(4))
    lines = t.to_csv(golden()).splitlines()
    assert lines[0] == "n,a_n,p_n,q_n,sign"
    assert lines[1] == "0,1,0,1,+"
    assert lines[2] == "1,1,1,1,-"


def test_oracle_golden_level_zero():
    g = golden()
    atoms = rotation_partition_oracle(g, 0, CTX)
    lengths = sorted(a.length for a in atoms)
    with CTX.scope():
        assert abs(lengths[0] - (1 - g)) < CTX.tolerance(8)
        assert abs(lengths[1] - g) < CTX.tolerance(8)


def test_oracle_golden_level_three_count():
    assert len(rotation_partition_oracle(golden(), 3, CTX)) == 8


def _periodic(text):
    return lambda: ContinuedFraction.parse(text).value(CTX)


def _sqrt7_minus_two():
    with CTX.scope():
        return gmpy2.sqrt(mpfr(7)) - 2


RHOS = {
    "golden": golden,
    "silver": silver,
    "1212": _periodic("cf:[1,2,...]"),
    "3113": _periodic("cf:[3,1,1,...]"),
    "sqrt7": _sqrt7_minus_two,
}


@pytest.mark.parametrize("name", sorted(RHOS))
@pytest.mark.parametrize("n", [0, 2, 5, 8, 10])
def test_oracle_tiles_circle(name, n):
    rho = RHOS[name]()
    tagged = rotation_partition_oracle(rho, n, CTX, tagged=True)
    t = convergents(expand(rho, n + 2, CTX))
    assert len(tagged) == t.q[n] + t.q[n + 1]
    assert sum(1 for g, _, _ in tagged if g == n) == t.q[n + 1]
    tol = CTX.tolerance(32)
    with CTX.scope():
        total = sum((iv.length for _, _, iv in tagged), mpfr(0))
        assert abs(total - 1) < tol
        for (_, _, a), (_, _, b) in zip(tagged, tagged[1:]):
            assert abs(a.left + a.length - b.left) < tol


@pytest.mark.parametrize("name", sorted(RHOS))
def test_oracle_refines_two_levels_down(name):
    rho = RHOS[name]()
    tol = CTX.tolerance(32)
    for n in range(0, 8):
        coarse = rotation_partition_oracle(rho, n, CTX)
        fine = rotation_partition_oracle(rho, n + 2, CTX)
        lefts = [c.left for c in coarse]
        assert len(fine) > len(coarse)
        with CTX.scope():
            for a in fine:
                mid = a.left + a.length / 2
                c = coarse[(bisect.bisect_right(lefts, mid if mid < 1 else mid - 1) - 1) % len(coarse)]
                assert c.contains_interval(a, tol)
