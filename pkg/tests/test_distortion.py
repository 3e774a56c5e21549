import random

import gmpy2
import pytest
from gmpy2 import mpfr
from hypothesis import given
from hypothesis import strategies as st

from beaubounds.circlemap import MapSpec, arnold, build, rotation
from beaubounds.distortion import (
    CriticalStep,
    DiffeoBlock,
    InjectivityError,
    IntervalPair,
    MobiusMap,
    admissible_steps,
    c1_bound_constant,
    cri_product,
    critical_step_ratio,
    crd,
    crd_return_map_direct,
    crd_return_map_max,
    cross_ratio,
    decompose,
    default_cap,
    fit_koebe_constant,
    koebe_bound,
    koebe_check,
    log_derivative_variation,
    random_pair,
    schwarzian_iterate,
    schwarzian_negative_on,
    theorem_ceiling,
    verify_negative_schwarzian,
)
from beaubounds.numerics import PrecisionContext, reduce_mod1
from beaubounds.partition import ReturnStructure, build_partition

CTX = PrecisionContext(256)
CHAIN_TOL = CTX.tolerance(40)


def pair(*xs):
    return IntervalPair(*(CTX.real(x) for x in xs))


def test_cross_ratio_examples():
    with CTX.scope():
        assert abs(cross_ratio(pair("0", "0.25", "0.75", "1")) - mpfr(1) / 9) <= CTX.tolerance(4)
    with pytest.raises(ValueError):
        pair("0", "0.5", "0.4", "0.9")
    with pytest.raises(ValueError):
        pair("0", "0.5", "0.6", "1.5")


def test_cross_ratio_vanishes_with_wings():
    vals = [cross_ratio(pair(f"{0.5 - 0.25 - e}", "0.25", "0.75", f"{0.75 + e}")) for e in (1e-1, 1e-3, 1e-6)]
    assert vals[0] > vals[1] > vals[2]
    assert vals[2] < 1e-10


@given(st.lists(st.integers(1, 10**6), min_size=4, max_size=4, unique=True),
       st.integers(1, 1000), st.integers(-1000, 1000))
def test_cross_ratio_affine_invariance(points, scale, shift):
    pts = sorted(points)
    with CTX.scope():
        base = IntervalPair(*(mpfr(p) / 10**6 / 2 for p in pts))
        lam, mu = mpfr(scale) / 1000, mpfr(shift) / 1000
        moved = IntervalPair(*(lam * x + mu for x in (base.a, base.b, base.c, base.d)))
        # Rounding of the shifted endpoints is relative to |mu|, not to the interval lengths.
        shortest = min(moved.lengths())
        tol = CTX.tolerance(8) * (1 + abs(mu)) / shortest
        assert abs(cross_ratio(moved) - cross_ratio(base)) <= tol
        assert 0 < cross_ratio(base) < 1


def test_mobius_crd_is_one():
    m = MobiusMap.of(1, "0.1", "0.5", "1.2", CTX)
    rng = random.Random(5)
    for _ in range(200):
        p = random_pair(rng, CTX, CTX.real(0), CTX.real(1))
        for j in (1, 3, 20):
            v = crd(m, j, p)
            assert abs(v.direct - 1) <= CHAIN_TOL
            assert abs(v.chain - 1) <= CHAIN_TOL
    with pytest.raises(ValueError):
        MobiusMap.of(1, 2, 3, 4, CTX)
    assert m.pole() == CTX.real("-2.4")


def test_rotation_crd_is_one(golden_rotation):
    rng = random.Random(6)
    for _ in range(50):
        p = random_pair(rng, CTX, CTX.real("0.1"), CTX.real("0.9"))
        assert abs(crd(golden_rotation, rng.randint(1, 100), p).direct - 1) <= CHAIN_TOL


def test_chain_rule_identity():
    f = build(arnold("0.61"), CTX)
    rng = random.Random(7)
    for _ in range(10):
        p = random_pair(rng, CTX, CTX.real("0.2"), CTX.real("0.21"))
        for j in (1, 17, 200):
            v = crd(f, j, p)
            assert abs(v.direct / v.chain - 1) <= CHAIN_TOL


def test_crd_straddling_critical_point_bounded():
    f = build(arnold("0"), CTX)
    d = 3
    rng = random.Random(8)
    r = f.critical_radii[0]
    worst = 0
    with CTX.scope():
        for _ in range(300):
            u = sorted(mpfr(rng.uniform(-1, 1)) * r for _ in range(4))
            if u[1] < 0 < u[2]:
                worst = max(worst, crd(f, 1, IntervalPair(*u)).direct)
    assert 1 < worst <= 9 * d * d


def test_injectivity_error():
    class Fold:
        ctx = CTX

        def _lift(self, x):
            return -x

    with CTX.scope():
        with pytest.raises(InjectivityError):
            pair("0.1", "0.2", "0.3", "0.4").image(Fold())


def test_cri_product_examples(golden_rotation):
    f = build(arnold("0.6"), CTX)
    rng = random.Random(9)
    pairs = [random_pair(rng, CTX, CTX.real(k) / 10 + CTX.real("0.02"), CTX.real(k) / 10 + CTX.real("0.09"))
             for k in range(2, 9)]
    single = cri_product(f, pairs[:1])
    assert single.product == crd(f, 1, pairs[0]).direct
    assert single.multiplicity == 1
    assert abs(cri_product(golden_rotation, pairs).product - 1) <= CHAIN_TOL
    res = cri_product(f, pairs)
    assert res.multiplicity == 1
    # |log CrD(f; M, T)| <= 2 Var_T log Df for a diffeomorphism of T.
    with CTX.scope():
        bound = sum(2 * log_derivative_variation(f, p.a, p.d) for p in pairs)
        assert abs(gmpy2.log(res.product)) <= bound * (1 + mpfr("1e-6"))


def test_schwarzian_iterate_properties():
    f = build(MapSpec.of(("0", 3), ("1/2", 3), offset="0.37"), CTX)
    x = CTX.real("0.123")
    assert schwarzian_iterate(f, 1, x).total == f.schwarzian(x)
    r = build(rotation("0.3"), CTX)
    assert schwarzian_iterate(r, 25, x).total == 0
    with CTX.scope():
        for j, jp in ((3, 4), (10, 7)):
            whole = schwarzian_iterate(f, j + jp, x).total
            y = f._coerce(f.iterate_lift(x, j))
            _, products = f.derivative_along_orbit(x, j + 1)
            composed = schwarzian_iterate(f, jp, y).total * products[j] ** 2 + schwarzian_iterate(f, j, x).total
            assert abs(whole - composed) <= CHAIN_TOL * abs(whole)
            s = schwarzian_iterate(f, j + jp, x)
            assert s.total == s.near + s.far


def test_schwarzian_iterate_negative_on_return_interval(tuned_arnold):
    rs = tuned_arnold.returns[0]
    n = 9
    q = tuned_arnold.table.q
    tuned_arnold.partition(n)
    with tuned_arnold.ctx.scope():
        x = rs.orbit[0] + rs.displacement(n) / 3
    assert schwarzian_iterate(tuned_arnold.fmap, q[n + 1], x).total < 0


def test_verify_negative_schwarzian_rotation_zero_family(golden_rotation, golden_table):
    rs = ReturnStructure.compute(golden_rotation, CTX.real(0), golden_table, 1)
    rep = verify_negative_schwarzian(rs, 5, 8)
    assert rep.zero_family and not rep.all_negative


def test_verify_negative_schwarzian_arnold(tuned_arnold):
    rep = verify_negative_schwarzian(tuned_arnold.returns[0], 8, 64)
    assert rep.all_negative and rep.variant_all_negative
    assert rep.worst < 0


def test_verify_negative_schwarzian_bicritical(default_suite):
    tm = default_suite["bicritical"]
    for n in (10, 11):
        rep = verify_negative_schwarzian(tm.returns[0], n, 32)
        assert rep.all_negative and rep.variant_all_negative


def test_c1_bounds(golden_rotation, golden_table, tuned_arnold):
    rs = ReturnStructure.compute(golden_rotation, CTX.real(0), golden_table, 1)
    # An isometry: K is 1 up to the rounding of the orbit.
    assert abs(c1_bound_constant(rs, 6, 8).K - 1) <= CHAIN_TOL
    ks = [c1_bound_constant(tuned_arnold.returns[0], n, 16).K for n in range(6, 13)]
    assert all(k >= 1 for k in ks)
    assert max(ks) < 5
    assert abs(ks[-1] / ks[-2] - 1) < 0.05


def test_koebe_bound_limit():
    assert koebe_bound(CTX.real(1), CTX.real(0), 0) == 4


def test_koebe_rotation(golden_rotation):
    res = koebe_check(golden_rotation, 10, ("0.1", "0.4"), ("0.2", "0.3"), "0.5", 10, c0=0)
    assert res.checked and res.measured == 1 and res.ok


def test_koebe_fitted_bound_on_diffeo_branch(tuned_arnold):
    # Between consecutive critical times: f^(q_{n+1} - 1) maps f(I_n) diffeomorphically.
    fmap = tuned_arnold.fmap
    rs = tuned_arnold.returns[0]
    q = tuned_arnold.table.q
    samples, results = [], []
    for n in (6, 7, 8, 9):
        k = q[n + 1] - 1
        with fmap.ctx.scope():
            a, b = sorted((rs.orbit[1], rs.orbit[1] + rs.displacement(n, 1)))
            w = b - a
            T = (a + w / 64, b - w / 64)
            M = (a + w * 3 / 8, b - w * 3 / 8)
        res = koebe_check(fmap, k, T, M, "0.1", 2)
        assert res.checked, res.preconditions
        samples.append((res.measured, res.space, res.total_length))
        results.append(res)
    c0 = fit_koebe_constant(samples)
    for (measured, tau, ell) in samples:
        with fmap.ctx.scope():
            assert measured <= koebe_bound(tau, ell, c0) * (1 + mpfr("1e-12"))


def test_koebe_reports_critical_preconditions():
    f = build(arnold("0.3"), CTX)
    res = koebe_check(f, 1, ("-0.1", "0.1"), ("-0.01", "0.01"), "0.1", 1, c0=1)
    assert not res.checked and res.bound is None


def test_critical_step_ratio_within_3d(default_suite):
    for tm in default_suite.values():
        fmap = tm.fmap
        for c, d, r in zip(fmap.critical_positions, fmap.critical_orders, fmap.critical_radii):
            with fmap.ctx.scope():
                for lo, hi in ((c - r, c + r), (c, c + r / 3), (c - r / 7, c + r / 2)):
                    assert critical_step_ratio(fmap, lo, hi, 16) <= 3 * d


def test_decompose_rotation_single_block(golden_rotation, golden_table):
    rs = ReturnStructure.compute(golden_rotation, CTX.real(0), golden_table, 1)
    tr = decompose(rs, 6, 3, 5)
    assert len(tr.blocks) == 1 and isinstance(tr.blocks[0], DiffeoBlock)
    assert tr.blocks[0].length == 5 and tr.worst_distortion == 1


def test_decompose_arnold_counts(tuned_arnold):
    n = 10
    p = tuned_arnold.partition(n)
    ks = admissible_steps(p)
    for pos in (max(range(len(ks)), key=lambda s: ks[s]), 0, len(p) // 2):
        if ks[pos] < 1:
            continue
        tr = decompose(tuned_arnold.returns[0], n, pos, ks[pos], grid_size=8)
        assert sum(b.length for b in tr.blocks) == ks[pos]
        assert tr.diffeo_count <= 4 and tr.critical_count <= 3
        assert tr.counts_ok


def test_decompose_single_critical_step(tuned_arnold):
    p = tuned_arnold.partition(6)
    # The atom to the right of the base point has c_0 in its star.
    pos = next(s for s, a in enumerate(p.atoms) if a.left_orbit == 0)
    tr = decompose(tuned_arnold.returns[0], 6, pos, 1)
    assert len(tr.blocks) == 1 and isinstance(tr.blocks[0], CriticalStep)
    assert tr.blocks[0].critical_point_index == 0


def test_decompose_rejects_bad_coarse_level(tuned_arnold):
    with pytest.raises(ValueError):
        decompose(tuned_arnold.returns[0], 6, 0, 1, coarse_level=6)


def brute_admissible(p, cap):
    """Containment of every image f^j(D) in some atom, tested against all atoms."""
    rs = p.returns
    tol = rs.ctx.tolerance(40)
    out = []
    with rs.ctx.scope():
        for a in p.atoms:
            k = 0
            for j in range(1, cap + 1):
                rs.ensure(max(a.left_orbit, a.right_orbit) + j + 1)
                left = reduce_mod1(rs.orbit[a.left_orbit + j])
                length = reduce_mod1(rs.orbit[a.right_orbit + j] - rs.orbit[a.left_orbit + j])
                img = type(a.interval)(left, length)
                if not any(b.interval.contains_interval(img, tol) for b in p.atoms):
                    break
                k = j
            out.append(k)
    return out


@pytest.mark.parametrize("n", [3, 4, 5, 6])
def test_crd_max_matches_brute_force(tuned_arnold, n):
    rs = tuned_arnold.returns[0]
    p = tuned_arnold.partition(n)
    cap = default_cap(rs, n)
    ks = brute_admissible(p, cap)
    assert admissible_steps(p, cap) == ks
    best = mpfr(1)
    for s, k in enumerate(ks):
        for j in range(1, k + 1):
            best = max(best, crd_return_map_direct(rs, n, s, j))
    fast = crd_return_map_max(rs, n, partition=p)
    with rs.ctx.scope():
        assert abs(fast.value / best - 1) <= rs.ctx.tolerance(48)
    assert fast.capped_atoms == 0


def test_crd_max_rotation_is_one(golden_rotation, golden_table):
    rs = ReturnStructure.compute(golden_rotation, CTX.real(0), golden_table, 1)
    for n in (3, 6, 9):
        assert abs(crd_return_map_max(rs, n).value - 1) <= CHAIN_TOL


def test_theorem_ceiling():
    assert theorem_ceiling(1, 3) == 1.5 ** 8 * 81 ** 3
    assert 1.36e7 < theorem_ceiling(1, 3) < 1.37e7


def test_contraction_under_negative_schwarzian(tuned_arnold):
    fmap = tuned_arnold.fmap
    rs = tuned_arnold.returns[0]
    n = 8
    q = tuned_arnold.table.q
    rng = random.Random(10)
    with fmap.ctx.scope():
        lo, hi = sorted((rs.orbit[0], rs.orbit[0] + rs.displacement(n)))
    checked = 0
    for _ in range(40):
        p = random_pair(rng, fmap.ctx, lo, hi)
        k = rng.randint(1, q[n + 1])
        if schwarzian_negative_on(fmap, p.a, p.d, k, 8):
            assert crd(fmap, k, p).direct < 1
            checked += 1
    assert checked == 40
