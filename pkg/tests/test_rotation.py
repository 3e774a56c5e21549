import json
from fractions import Fraction
from pathlib import Path

import gmpy2
import pytest
from gmpy2 import mpfr

from beaubounds.arithmetic import ContinuedFraction, convergents
from beaubounds.circlemap import arnold, build, rotation
from beaubounds.numerics import PrecisionContext
from beaubounds.partition import ReturnStructure
from beaubounds.rotation import (
    Outcome,
    TuningError,
    compare,
    default_base,
    rotation_number_estimate,
    tune,
)

CTX = PrecisionContext(256)
BASELINES = json.loads((Path(__file__).parent / "baselines.json").read_text())
GOLDEN = convergents(ContinuedFraction.golden(48))
SILVER = convergents(ContinuedFraction.silver(48))


def golden():
    with CTX.scope():
        return (gmpy2.sqrt(mpfr(5)) - 1) / 2


def exact_verdict(a: Fraction, table, depth):
    """First violated closest-return sign of the rotation by ``a``, in exact rationals."""
    for n in range(depth + 1):
        s = table.q[n] * a - table.p[n]
        if n % 2 == 0 and s <= 0:
            return Outcome.TOO_SMALL, n
        if n % 2 == 1 and s >= 0:
            return Outcome.TOO_LARGE, n
    return Outcome.CONSISTENT, depth


def test_compare_golden_rotation(golden_rotation):
    v = compare(golden_rotation, GOLDEN, 10)
    assert (v.outcome, v.n) == (Outcome.CONSISTENT, 10)


@pytest.mark.parametrize("a,expected", [("0.5", (Outcome.TOO_SMALL, 2)), ("0.7", (Outcome.TOO_LARGE, 3))])
def test_compare_rational_rotations(a, expected):
    v = compare(build(rotation(a), CTX), GOLDEN, 10)
    assert (v.outcome, v.n) == expected == exact_verdict(Fraction(a), GOLDEN, 10)


@pytest.mark.parametrize("a", ["0.1", "0.38", "0.6", "0.61", "0.62", "0.618", "0.6181", "0.9", "1/3", "5/8"])
def test_compare_agrees_with_exact_oracle(a):
    v = compare(build(rotation(a), CTX), GOLDEN, 14)
    assert (v.outcome, v.n) == exact_verdict(Fraction(a), GOLDEN, 14)


def test_compare_monotone_in_offset():
    family = build(arnold("0"), CTX)
    rank = {Outcome.TOO_SMALL: -1, Outcome.CONSISTENT: 0, Outcome.TOO_LARGE: 1}
    seen = []
    for i in range(1, 200):
        v = compare(family.with_offset(Fraction(i, 200)), GOLDEN, 8)
        seen.append(rank[v.outcome])
    assert seen == sorted(seen)
    assert -1 in seen and 1 in seen


def test_tune_rotation_golden():
    res = tune(rotation(), GOLDEN, 20, CTX, resolution_bits=28)
    assert res.bracket_width <= mpfr(2) ** -28
    assert abs(res.a_star - golden()) <= res.bracket_width
    assert res.verified_depth >= 20


def test_tune_rotation_silver():
    res = tune(rotation(), SILVER, 10, CTX, resolution_bits=30)
    with CTX.scope():
        assert abs(res.a_star - (gmpy2.sqrt(mpfr(2)) - 1)) <= res.bracket_width


def test_tune_arnold_golden_baseline():
    res = tune(arnold(), GOLDEN, 12, PrecisionContext(128), resolution_bits=30)
    base = BASELINES["tune_arnold_golden_depth12_res30"]
    assert abs(float(res.a_star) - base) < 2 ** -29
    # Same bracket at 256 bits.
    res256 = tune(arnold(), GOLDEN, 12, CTX, resolution_bits=30)
    assert abs(float(res256.a_star) - float(res.a_star)) < 2 ** -29
    f = build(res256.spec(arnold()), CTX)
    assert abs(rotation_number_estimate(f, 10_000) - golden()) < mpfr("1e-3")


def test_tune_brackets_nest():
    coarse = tune(arnold(), GOLDEN, 10, CTX, resolution_bits=16)
    fine = tune(arnold(), GOLDEN, 10, CTX, resolution_bits=26)
    assert coarse.bracket[0] <= fine.bracket[0] < fine.bracket[1] <= coarse.bracket[1]


def test_tuned_closest_returns_match_table():
    res = tune(arnold(), GOLDEN, 14, CTX)
    f = build(res.spec(arnold()), CTX)
    rs = ReturnStructure.compute(f, default_base(f), GOLDEN, 1)
    assert rs.closest_return_times(GOLDEN.q[14]) == sorted(set(GOLDEN.q[1:15]))
    rs.check_return_times(14)


def test_tune_reports_exhausted_table():
    short = convergents(ContinuedFraction.explicit([1] * 8))
    with pytest.raises(TuningError) as err:
        tune(rotation(), short, 6, CTX, resolution_bits=40)
    assert err.value.bracket is not None


def test_tune_rejects_shallow_table():
    with pytest.raises(ValueError):
        tune(rotation(), convergents(ContinuedFraction.explicit([1, 1, 1])), 6, CTX)


def test_rotation_number_estimates(golden_rotation):
    assert abs(rotation_number_estimate(golden_rotation, 10_000) - golden()) < mpfr("1e-4")
    assert rotation_number_estimate(build(arnold("0"), CTX), 1000) == 0
    with pytest.raises(ValueError):
        rotation_number_estimate(golden_rotation, 0)
