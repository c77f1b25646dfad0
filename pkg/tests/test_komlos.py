import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from charge_komlos.charge import (
    ChargeError,
    charge,
    meet,
    probability,
    product_charge,
    restrict,
    uniform,
    variation_norm,
    zero,
)
from charge_komlos.komlos import (
    ExtractionError,
    KomlosConfig,
    WeightMatrix,
    block_weights,
    extract_independent,
    extract_positive,
    extract_signed,
    extract_unbounded,
    test_asymptotic_orthogonality as orthogonality,
    truncate,
)
from charge_komlos.set_algebra import make_product, power_set_algebra
import oracles


def singular_family(d, horizon):
    a = power_set_algebra(d)
    l = uniform(a)
    return a, l, [charge(a, np.eye(d)[n] if n < d else np.zeros(d)) for n in range(horizon)]


def test_truncate_examples():
    a = power_set_algebra(2)
    l = probability(a, [0.5, 0.5])
    f = charge(a, [0.2, 0.4])
    assert np.array_equal(truncate(f, l, 0).values, f.values)
    g = charge(a, [40.0, 3.0])
    assert np.array_equal(truncate(g, l, 7).values, g.values)
    assert np.array_equal(truncate(charge(a, [4, 1]), l, 1).values, [1, 1])
    with pytest.raises(ChargeError):
        truncate(charge(a, [-1, 1]), l, 0)


def test_config_validation():
    with pytest.raises(ValueError):
        KomlosConfig(K=0)
    with pytest.raises(ValueError):
        KomlosConfig(horizon=0)
    with pytest.raises(ValueError):
        KomlosConfig(mode="other")


def test_empty_sequence():
    l = uniform(power_set_algebra(2))
    with pytest.raises(ExtractionError):
        extract_positive([], l)


def test_weight_matrix_checks():
    ok = WeightMatrix(({0: Fraction(1, 2), 1: Fraction(1, 2)}, {2: Fraction(1)}), 3)
    assert ok.check() == {"row_stochastic": True, "forward": True, "disjoint": True}
    backward = WeightMatrix(({1: Fraction(1)}, {0: Fraction(1)}), 2)
    assert not backward.check()["forward"]
    overlap = WeightMatrix(({0: Fraction(1, 2), 1: Fraction(1, 2)}, {1: Fraction(1)}), 2)
    assert not overlap.check()["disjoint"]
    short = WeightMatrix(({0: Fraction(1, 3)},), 1)
    assert not short.check()["row_stochastic"]
    W, unused = block_weights(10, 3)
    assert len(W) == 3 and unused == 1 and all(W.check().values())


def test_weight_compose():
    alpha = WeightMatrix(({0: Fraction(1, 2), 1: Fraction(1, 2)}, {2: Fraction(1, 3), 3: Fraction(2, 3)},
                          {4: Fraction(1)}), 5)
    beta = WeightMatrix(({0: Fraction(1, 4), 1: Fraction(3, 4)}, {2: Fraction(1)}), 3)
    gamma = beta.compose(alpha)
    assert np.allclose(gamma.dense(), beta.dense() @ alpha.dense())
    assert all(gamma.check().values())
    assert gamma.rows[0] == {0: Fraction(1, 8), 1: Fraction(1, 8), 2: Fraction(1, 4), 3: Fraction(1, 2)}


def test_constant_sequence():
    a = power_set_algebra(6)
    l = uniform(a)
    F = charge(a, [0.1, 0.5, 0.0, 0.3, 0.2, 0.7])
    res = extract_positive([F] * 64, l, KomlosConfig(horizon=64))
    assert res.passed, res.failures
    assert np.allclose(res.xi.values, F.values, atol=1e-15)
    ratio = max(F.values / l.values)
    for n, A in enumerate(res.restriction_sets, start=1):
        if n >= math.log2(ratio):
            assert A == a.omega()


def test_pairwise_singular_family_vanishes():
    _, l, F = singular_family(16, 512)
    res = extract_positive(F, l)
    assert res.passed, res.failures
    assert res.certificates.xi_norm <= 1e-6


def test_singular_family_at_horizon_d_keeps_mass():
    # inside a window of length d every atom is still charged, so no averaging can vanish
    _, l, F = singular_family(8, 8)
    res = extract_positive(F, l, KomlosConfig(horizon=8))
    assert res.certificates.xi_norm == pytest.approx(1.0)


def test_iid_matches_cesaro_oracle():
    d, N = 16, 512
    a = power_set_algebra(d)
    l = uniform(a)
    rng = np.random.default_rng(42)
    X = rng.uniform(0, 2, (N, d)) / d
    res = extract_positive([charge(a, x) for x in X], l)
    assert res.passed, res.failures
    xi = np.asarray(res.xi.values)
    m = np.full(d, 1.0 / d)
    sigma = X.std(axis=0, ddof=1)
    assert np.all(np.abs(xi - m) <= 3 * sigma / math.sqrt(N))
    assert np.abs(xi - m).sum() <= 3 * sigma.sum() / math.sqrt(N)
    # fit mode reproduces the Cesaro mean of the window's second half exactly
    assert np.allclose(xi, X[N // 2:].mean(axis=0), atol=1e-12)


def test_restriction_sets_are_min_covers():
    rng = np.random.default_rng(7)
    d = 5
    a = power_set_algebra(d)
    l = probability(a, rng.dirichlet(np.ones(d)))
    F = [charge(a, rng.exponential(1.0, d) * l.values * rng.integers(1, 8)) for _ in range(64)]
    res = extract_positive(F, l, KomlosConfig(horizon=64))
    ref = np.asarray(l.values)
    for n, (G, A) in enumerate(zip(res.G, res.restriction_sets), start=1):
        g = np.asarray(G.values)
        cap = 2.0 ** n * ref
        brute = oracles.min_cover(g.tolist(), cap.tolist())
        got = g[A.mask].sum() + cap[~A.mask].sum()
        assert got == pytest.approx(brute, abs=1e-12)
        assert got == pytest.approx(variation_norm(meet(G, charge(a, cap))), abs=1e-12)


def test_ladder_invariants():
    rng = np.random.default_rng(8)
    a = power_set_algebra(6)
    l = uniform(a)
    F = [charge(a, rng.exponential(1.0, 6) * rng.choice([0.1, 1, 30], 6)) for _ in range(128)]
    res = extract_positive(F, l, KomlosConfig(horizon=128))
    lad = res.ladder
    assert lad.monotone_gap() == 0
    assert lad.domination_gap() == 0
    assert lad.restr_residual() <= 1e-9
    for k in range(lad.K + 1):
        for n in range(k, lad.K + 1):
            assert np.allclose(np.minimum(lad.levels[n], 2.0 ** k * lad.reference), lad.levels[k], atol=1e-12)


def test_degenerate_reference_is_flagged():
    a = power_set_algebra(3)
    l = probability(a, [1.0, 0.0, 0.0])
    F = [charge(a, [0.0, 1.0, 1.0])] * 16
    res = extract_positive(F, l, KomlosConfig(horizon=16))
    assert res.diagnostics["degenerate"]
    assert res.certificates.xi_norm == 0


@st.composite
def positive_sequences(draw):
    d = draw(st.integers(1, 4))
    N = draw(st.integers(1, 40))
    vals = draw(st.lists(st.lists(st.floats(0, 5), min_size=d, max_size=d), min_size=N, max_size=N))
    return d, np.array(vals)


@given(positive_sequences(), st.sampled_from(["fit", "blocks"]), st.integers(1, 6))
@settings(max_examples=40, deadline=None)
def test_certificates_hold_on_random_inputs(seq, mode, b):
    d, X = seq
    a = power_set_algebra(d)
    l = uniform(a)
    res = extract_positive([charge(a, x) for x in X], l, KomlosConfig(horizon=len(X), mode=mode, block_size=b))
    assert all(res.weights.check().values())
    c = res.certificates
    assert np.all(c.partial_sum <= c.bound + 1e-9)
    assert c.monotone_gap <= 1e-12 and c.domination_gap <= 1e-12
    assert np.max(np.abs(c.mincover_gap)) <= 1e-9
    # the restriction identity needs a settled tail; when it fails it must be reported
    names = {f["name"] for f in res.failures}
    assert (c.restr_residual > 1e-6) == ("restr_residual" in names)


def test_signed_on_nonnegative_input_agrees():
    rng = np.random.default_rng(9)
    a = power_set_algebra(8)
    l = uniform(a)
    F = [charge(a, rng.uniform(0, 2, 8) / 8) for _ in range(256)]
    pos = extract_positive(F, l, KomlosConfig(horizon=256))
    sig = extract_signed(F, l, KomlosConfig(horizon=256))
    assert np.allclose(sig.diagnostics["zeta"], 0)
    assert np.abs(np.asarray(sig.xi.values) - np.asarray(pos.xi.values)).sum() <= 1e-6
    assert all(sig.weights.check().values())


def test_signed_alternating_vanishes():
    a = power_set_algebra(4)
    l = uniform(a)
    F0 = charge(a, [0.1, 0.4, 0.2, 0.3])
    F = [F0 * (-1) ** n for n in range(64)]
    for mode in ("fit", "blocks"):
        res = extract_signed(F, l, KomlosConfig(horizon=64, mode=mode))
        assert res.certificates.xi_norm <= 1e-12


def test_signed_hand_computed():
    # positive parts constant P on atoms {0,1}; negative parts a singular family on {2,3}
    a = power_set_algebra(4)
    l = uniform(a)
    P = np.array([1.0, 1.0, 0.0, 0.0])
    neg = [np.array([0, 0, 1.0, 0]), np.array([0, 0, 0, 1.0]), np.zeros(4), np.zeros(4)]
    F = [charge(a, P - m) for m in neg]
    res = extract_signed(F, l, KomlosConfig(horizon=4, mode="blocks", block_size=1))
    # stage 1: alpha = identity, chi = P; stage 2: beta = identity on F-bar = negatives,
    # zeta = mean of rows 3 and 4 = 0; gamma = identity; xi = P
    assert [dict(r) for r in res.weights.rows] == [{i: 1} for i in range(4)]
    assert np.allclose(res.xi.values, P, atol=1e-9)
    # B_1 = {2,3} (P = 1 > 2 * 1/4 on {0,1}); C_1 = {0,1,3}; ties route in, so C_2 = Omega
    assert [sorted(A.atoms) for A in res.restriction_sets] == [[3], [0, 1, 2, 3], [0, 1, 2, 3], [0, 1, 2, 3]]
    assert res.passed, res.failures


def test_orthogonality_examples():
    _, l, F = singular_family(8, 8)
    assert orthogonality(F, window=4, tau=1e-12).verdict
    a = power_set_algebra(3)
    f = charge(a, [0.2, 0.3, 0.5])
    rep = orthogonality([f] * 20, window=5, tau=1e-6)
    assert not rep.verdict and rep.tail_max.max() == pytest.approx(1.0)
    assert orthogonality([f * (1 / n) for n in range(1, 2001)], window=100, tau=0.05).verdict


def test_dichotomy():
    _, l, F = singular_family(16, 512)
    assert orthogonality(F, window=64, tau=1e-12).verdict
    assert extract_positive(F, l).certificates.xi_norm <= 1e-6
    a = power_set_algebra(16)
    f = charge(a, np.linspace(0.01, 0.12, 16))
    res = extract_positive([f] * 512, uniform(a))
    assert res.certificates.xi_norm >= variation_norm(f) - 1e-3 - 1e-6


def test_unbounded_linear_growth_flags_everything():
    a = power_set_algebra(4)
    l = uniform(a)
    xi, W, diag = extract_unbounded([l * n for n in range(1, 513)], l, KomlosConfig(block_size=8))
    assert xi.infinite == a.omega()
    assert variation_norm(xi.finite) == 0
    assert xi(a.event([0])) == math.inf and xi(a.empty()) == 0


def test_unbounded_agrees_with_positive_on_bounded_input():
    rng = np.random.default_rng(10)
    a = power_set_algebra(6)
    l = uniform(a)
    F = [charge(a, rng.uniform(0, 2, 6) / 6) for _ in range(512)]
    xi, _, diag = extract_unbounded(F, l, KomlosConfig(block_size=8))
    assert xi.infinite.is_empty()
    pos = extract_positive(F, l)
    assert np.allclose(xi.finite.values, pos.xi.values, atol=1e-12)


def test_unbounded_ramp_on_event():
    a = power_set_algebra(8)
    l = uniform(a)
    B = a.event([1, 4, 5])
    mu = restrict(l, B.complement())
    F = [restrict(l, B) * n + mu for n in range(1, 513)]
    xi, W, diag = extract_unbounded(F, l, KomlosConfig(block_size=8))
    assert xi.infinite == B
    assert np.abs(np.asarray(xi.finite.values) - np.asarray(mu.values)).sum() <= 1e-6
    assert diag["converged"]
    assert all(W.check().values())


def test_independent_indicators():
    a, ps = make_product([2] * 6)
    l = product_charge(ps, [[0.5, 0.5]] * 6)
    ref = np.asarray(l.values)
    F = [charge(a, (ps.coordinates[:, i] == 1) * ref) for i in range(6)]
    res, ind = extract_independent(F, l, ps, KomlosConfig(horizon=6, mode="blocks", block_size=1))
    assert ind.N == 0 and ind.A_eps == a.omega() and ind.passed


def test_independent_exact_product():
    m = 10
    a, ps = make_product([2] * m)
    l = product_charge(ps, [[0.5, 0.5]] * m)
    ref = np.asarray(l.values)
    # f_n = 2^(n+1) on success of coin n (coins numbered from 1)
    F = [charge(a, 2.0 ** (i + 2) * (ps.coordinates[:, i] == 1) * ref) for i in range(m)]
    cfg = KomlosConfig(horizon=m, mode="blocks", block_size=1)
    for eps in (0.05, 0.3, 0.6, 0.9, 0.99):
        res, ind = extract_independent(F, l, ps, cfg, eps)
        assert np.allclose(ind.probabilities, 0.5)
        # exact: prod_{n > N} 1/2 = 2^-(m - N) > 1 - eps with N minimal
        expect = min(N for N in range(m + 1) if Fraction(1, 2 ** (m - N)) > 1 - Fraction(eps))
        assert ind.N == expect
        assert ind.l_A_eps == pytest.approx(ind.product, abs=1e-12)


def test_independent_rejects_correlated_reference():
    a, ps = make_product([2, 2])
    l = probability(a, [0.5, 0, 0, 0.5])
    F = [charge(a, (ps.coordinates[:, i] == 1) * l.values) for i in range(2)]
    with pytest.raises(ExtractionError, match="blocks 0 and 1"):
        extract_independent(F, l, ps, KomlosConfig(horizon=2))


def test_independent_rejects_non_coordinate_densities():
    a, ps = make_product([2, 2])
    l = product_charge(ps, [[0.5, 0.5]] * 2)
    F = [charge(a, (ps.coordinates[:, 1] == 1) * l.values), zero(a)]
    with pytest.raises(ExtractionError, match="simple over coordinate 0"):
        extract_independent(F, l, ps, KomlosConfig(horizon=2))


def test_result_json_shape():
    a, l, F = singular_family(4, 16)
    obj = extract_positive(F, l, KomlosConfig(horizon=16)).to_json()
    assert set(obj) >= {"xi", "weights", "restriction_sets", "certificates"}
    assert all(len(t) == 3 for t in obj["weights"])
    rows = extract_positive(F, l, KomlosConfig(horizon=16)).certificates.rows()
    assert list(rows[0]) == ["n", "norm_residual", "lambda_Anc", "partial_sum", "bound"]
