import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from charge_komlos.charge import ChargeError, charge, probability, uniform
from charge_komlos.komlos import KomlosConfig, extract_positive
from charge_komlos.set_algebra import (
    AlgebraError,
    Partition,
    enumerate_partitions,
    make_algebra,
    power_set_algebra,
    refine,
)
from charge_komlos.vector_charge import (
    LOneVector,
    RBoundError,
    SampleSpace,
    VectorCharge,
    ba0_norm,
    check_R_bounded,
    check_vector_property_P,
    extract_vector,
    f_pi,
    f_pi_value,
    partition_value,
)
import oracles


def vc(table, P=None):
    table = np.asarray(table, dtype=float)
    d, m = table.shape
    space = SampleSpace(np.full(m, 1.0 / m) if P is None else np.asarray(P, dtype=float))
    return VectorCharge(power_set_algebra(d), space, table)


def test_sample_space_validation():
    with pytest.raises(ChargeError):
        SampleSpace(np.array([0.5, 0.6]))
    with pytest.raises(ChargeError):
        SampleSpace(np.array([1.5, -0.5]))
    assert LOneVector(SampleSpace.uniform(2), np.array([1.0, -3.0])).norm == pytest.approx(2.0)


def test_ba0_norm_examples():
    a = make_algebra(3, [[0, 1, 2]])
    space = SampleSpace(np.array([0.25, 0.75]))
    F = VectorCharge(a, space, [[2.0, -4.0]])
    assert ba0_norm(F) == pytest.approx(0.25 * 2 + 0.75 * 4)
    assert ba0_norm(vc(np.zeros((3, 2)))) == 0


def test_ba0_norm_is_partition_sup():
    rng = np.random.default_rng(11)
    for d in (2, 3, 4, 5):
        for _ in range(10):
            F = vc(rng.normal(size=(d, 3)), rng.dirichlet(np.ones(3)))
            brute = max(partition_value(F, p) for p in enumerate_partitions(F.algebra))
            assert ba0_norm(F) == pytest.approx(brute, abs=1e-12)
            # independent oracle: sup over set partitions, per sample, weighted
            w = F.space.weights
            per = max(sum(w @ np.abs(F.table[blk].sum(axis=0)) for blk in part)
                      for part in oracles.rgs_partitions(d))
            assert ba0_norm(F) == pytest.approx(per, abs=1e-12)


@given(st.lists(st.floats(-5, 5), min_size=6, max_size=6), st.lists(st.floats(0, 2), min_size=6, max_size=6))
@settings(max_examples=50)
def test_ba0_is_lattice_norm(f, extra):
    F = vc(np.array(f).reshape(3, 2))
    G = vc(np.abs(F.table) + np.array(extra).reshape(3, 2))
    assert ba0_norm(F) <= ba0_norm(G) + 1e-12


def test_f_pi_examples():
    F = vc([[1.0, 2.0], [-1.0, 0.5]])
    a = F.algebra
    coarse = Partition.coarsest(a)
    for A in a.all_events():
        assert np.allclose(f_pi_value(F, coarse, A).values, np.abs(F(A).values))
    fine = f_pi(F, Partition.finest(a))
    assert np.allclose(fine.table, np.abs(F.table))
    # cancellation: atoms +1 and -1
    G = vc([[1.0], [-1.0]])
    assert f_pi_value(G, Partition.coarsest(G.algebra), G.algebra.omega()).values[0] == 0
    assert f_pi_value(G, Partition.finest(G.algebra), G.algebra.omega()).values[0] == 2
    with pytest.raises(AlgebraError):
        f_pi(F, Partition.finest(power_set_algebra(3)))


def test_f_pi_additive_and_monotone():
    rng = np.random.default_rng(12)
    F = vc(rng.normal(size=(4, 2)))
    a = F.algebra
    parts = list(enumerate_partitions(a))
    for p in parts[::3]:
        sub = f_pi(F, p)
        blocks = p.events()
        # additive on the sub-algebra: value on a union of blocks is the sum
        for i in range(len(blocks)):
            for j in range(i + 1, len(blocks)):
                u = f_pi_value(F, p, blocks[i] | blocks[j]).values
                assert np.allclose(u, sub.table[i] + sub.table[j])
        for q in parts[::5]:
            r = refine(p, q)
            for A in a.all_events():
                assert np.all(f_pi_value(F, r, A).values >= f_pi_value(F, p, A).values - 1e-12)


def test_vector_property_P():
    rng = np.random.default_rng(13)
    F = vc(rng.random((3, 2)))
    assert check_vector_property_P([F * (1 - 2.0 ** -n) for n in range(1, 40)], supremum=F)
    assert check_vector_property_P([F] * 4)
    steps = rng.random((40, 3, 2)) * 0.5 ** np.arange(40)[:, None, None]
    seq = [vc(t) for t in np.cumsum(steps, axis=0)]
    assert check_vector_property_P(seq, supremum=vc(steps.sum(axis=0)))
    with pytest.raises(ChargeError, match="increasing"):
        check_vector_property_P([F, F * 0.5])


def test_cauchy_limit_norm():
    rng = np.random.default_rng(14)
    F, G = vc(rng.normal(size=(3, 2))), vc(rng.normal(size=(3, 2)))
    seq = [F + G * 2.0 ** -n for n in range(60)]
    limit = seq[-1]
    assert np.allclose(limit.table, F.table, atol=1e-15)
    assert ba0_norm(limit) <= max(ba0_norm(s) for s in seq[-10:]) + 1e-12


def test_json_roundtrip():
    F = vc([[1.0, 2.0], [3.0, 4.0]], [0.3, 0.7])
    obj = F.to_json()
    assert obj["atoms"] == 2 and obj["samples"] == 2 and obj["P"] == [0.3, 0.7]
    G = VectorCharge.from_json(obj)
    assert np.array_equal(G.table, F.table)


def test_R_bound_embedding_is_bounded():
    a = power_set_algebra(4)
    l = probability(a, [0.1, 0.2, 0.3, 0.4])
    space = SampleSpace.uniform(3)
    rep = check_R_bounded([VectorCharge.embed(l, space)] * 5, l, bound=1.0 + 1e-12)
    assert rep.bounded and rep.hull_quantile == pytest.approx(1.0)


def test_R_bound_growing_atom_is_named():
    a = power_set_algebra(4)
    l = uniform(a)
    space = SampleSpace.uniform(2)
    F = []
    for n in range(20):
        t = np.tile(np.asarray(l.values)[:, None], (1, 2))
        t[2] *= 2.0 ** n
        F.append(VectorCharge(a, space, t))
    rep = check_R_bounded(F, l, bound=1e3)
    assert not rep.bounded
    assert rep.worst["atoms"] == [2] and rep.worst["n"] == 19


def test_R_bound_matches_sweep():
    rng = np.random.default_rng(15)
    for _ in range(10):
        d = int(rng.integers(2, 6))
        a = power_set_algebra(d)
        l = probability(a, rng.dirichlet(np.ones(d)))
        space = SampleSpace.uniform(3)
        F = [VectorCharge(a, space, rng.random((d, 3)) * 3) for _ in range(6)]
        bound = 4.0
        ref = np.asarray(l.values)
        brute = max(F_n.table[blk].sum(axis=0).max() / ref[blk].sum()
                    for F_n in F for part in oracles.rgs_partitions(d) for blk in part)
        rep = check_R_bounded(F, l, bound=bound)
        assert rep.hull_quantile == pytest.approx(brute)
        assert rep.bounded == (brute <= bound)
        # with l > 0 the finest partition already attains the sweep (mediant inequality)
        heur = check_R_bounded(F, l, bound=bound, cap=0)
        assert heur.heuristic and heur.hull_quantile == pytest.approx(brute)


def test_R_bound_quantile_vs_strict():
    a = power_set_algebra(2)
    l = uniform(a)
    P = np.array([0.5, 0.5 - 1e-8, 1e-8])
    space = SampleSpace(P)
    t = np.array([[0.5, 0.5, 1e9], [0.5, 0.5, 0.5]])
    F = [VectorCharge(a, space, t)]
    assert check_R_bounded(F, l, bound=10.0).bounded
    assert not check_R_bounded(F, l, bound=10.0, strict=True).bounded


def _independent_slices(seed, d=4, m=3, N=256):
    rng = np.random.default_rng(seed)
    a = power_set_algebra(d)
    l = uniform(a)
    space = SampleSpace.uniform(m)
    T = rng.uniform(0, 2, (N, d, m)) / d
    return a, l, space, T


def test_extract_vector_per_slice_consistency():
    a, l, space, T = _independent_slices(16)
    cfg = KomlosConfig(horizon=256)
    res = extract_vector([VectorCharge(a, space, t) for t in T], l, space, cfg)
    assert res.passed, res.failures
    for w in range(space.size):
        scalar = extract_positive([charge(a, t[:, w]) for t in T], l, cfg)
        assert np.abs(res.xi.table[:, w] - np.asarray(scalar.xi.values)).sum() <= 1e-6
    assert res.P_H == pytest.approx(1.0)
    assert res.P_B[-1] == pytest.approx(1.0)
    assert all(res.weights.check().values())


def test_extract_vector_scalar_embedding():
    rng = np.random.default_rng(17)
    a = power_set_algebra(5)
    l = uniform(a)
    space = SampleSpace.uniform(2)
    F = [charge(a, rng.uniform(0, 2, 5) / 5) for _ in range(128)]
    cfg = KomlosConfig(horizon=128)
    scalar = extract_positive(F, l, cfg)
    res = extract_vector([VectorCharge.embed(f, space) for f in F], l, space, cfg)
    for w in range(2):
        assert np.allclose(res.xi.table[:, w], scalar.xi.values, atol=1e-12)


def test_extract_vector_null_sample_ignored():
    a = power_set_algebra(3)
    l = uniform(a)
    space = SampleSpace(np.array([0.5, 0.5, 0.0]))
    rng = np.random.default_rng(18)
    F = []
    for n in range(128):
        t = rng.uniform(0, 2, (3, 3)) / 3
        t[:, 2] = 2.0 ** min(n, 60)
        F.append(VectorCharge(a, space, t))
    res = extract_vector(F, l, space, KomlosConfig(horizon=128))
    assert res.passed, res.failures
    assert res.P_H == pytest.approx(1.0)


def test_extract_vector_rejects_unbounded_ratios():
    a = power_set_algebra(2)
    l = probability(a, [1.0, 0.0])
    space = SampleSpace.uniform(2)
    F = [VectorCharge(a, space, [[1.0, 1.0], [1.0, 0.0]])] * 4
    with pytest.raises(RBoundError, match="offending generator"):
        extract_vector(F, l, space, KomlosConfig(horizon=4))
