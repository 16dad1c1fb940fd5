import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

import oracles
from mvica import evalkit as ek
from mvica import tables


def test_mcc_of_truth_is_one_with_identity_permutation():
    s = np.random.default_rng(0).standard_normal((200, 3))
    rep = ek.mcc(s, s)
    assert rep.mean == pytest.approx(1.0, abs=1e-12)
    assert list(rep.permutation) == [0, 1, 2]


def test_mcc_sees_through_monotone_maps_and_swaps():
    s = np.random.default_rng(1).standard_normal((300, 2))
    rep = ek.mcc(np.exp(s[:, ::-1]), s)
    assert rep.mean == pytest.approx(1.0, abs=1e-12)
    assert list(rep.permutation) == [1, 0]


def test_dependence_matrix_matches_scipy_spearman():
    rng = np.random.default_rng(2)
    s = rng.standard_normal((150, 3))
    est = s @ rng.standard_normal((3, 3)) + 0.1 * rng.standard_normal((150, 3))
    rep = ek.mcc(est, s)
    np.testing.assert_allclose(rep.dependence, oracles.spearman_abs(est, s), atol=1e-12)


def test_mcc_null_is_small():
    rng = np.random.default_rng(3)
    assert ek.mcc(rng.standard_normal((2000, 3)), rng.standard_normal((2000, 3))).mean < 0.1


def test_assignment_is_optimal_against_brute_force():
    import itertools

    rng = np.random.default_rng(4)
    for _ in range(20):
        dep = rng.uniform(size=(4, 4))
        perm = ek.match_components(dep)
        best = max(sum(dep[i, p[i]] for i in range(4)) for p in itertools.permutations(range(4)))
        assert sum(dep[i, perm[i]] for i in range(4)) == pytest.approx(best)


def test_mcc_errors():
    x = np.random.default_rng(0).standard_normal((20, 2))
    bad = x.copy()
    bad[:, 1] = 3.0
    with pytest.raises(ValueError, match="column 1"):
        ek.mcc(bad, x)
    with pytest.raises(ValueError):
        ek.mcc(x[:5], x[:5])
    with pytest.raises(ValueError):
        ek.mcc(x, x[:, :1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.permutations([0, 1, 2]))
def test_mcc_gauge_and_permutation_invariance(seed, perm):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal((60, 3))
    est = s @ rng.standard_normal((3, 3))
    base = ek.mcc(est, s).mean
    warped = np.column_stack([np.tanh(est[:, 0]), -est[:, 1] ** 3, np.exp(est[:, 2])])
    assert ek.mcc(warped, s).mean == base
    assert ek.mcc(est[:, list(perm)], s).mean == pytest.approx(base, abs=1e-12)


def test_mcc_report_csv(tmp_path):
    s = np.random.default_rng(0).standard_normal((50, 2))
    rep = ek.mcc(s[:, ::-1], s)
    path = ek.write_mcc_report(tmp_path / "mcc.csv", rep, seed=7)
    seed, header, rows = tables.read_table(path)
    assert seed == "7" and header == ["component", "matched_to", "score"]
    assert [r[1] for r in rows] == ["1", "0"]
    assert open(path).read().rstrip().endswith("mean_mcc=1")


# -- distance correlation -----------------------------------------------------


def test_dcor_matches_explicit_definition():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((25, 2))
    y = x[:, :1] ** 2 + 0.3 * rng.standard_normal((25, 1))
    assert ek.dcor(x, y) == pytest.approx(oracles.dcor_naive(x, y), abs=1e-12)


def test_dcor_is_symmetric_and_invariant():
    rng = np.random.default_rng(6)
    u, v = rng.standard_normal((80, 3)), rng.standard_normal((80, 2))
    v[:, 0] += u[:, 0] ** 2
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    base = ek.dcor(u, v)
    assert abs(ek.dcor(v, u) - base) < 1e-10
    assert abs(ek.dcor(u @ q, 4.5 * v) - base) < 1e-10


def test_dcor_test_of_identical_blocks():
    u = np.random.default_rng(7).standard_normal((100, 1))
    rep = ek.dcor_test(u, u, n_perm=99, seed=1)
    assert rep.statistic == pytest.approx(1.0)
    assert rep.p_value == pytest.approx(1 / 100)


def test_dcor_test_detects_pearson_blind_dependence():
    u = np.random.default_rng(8).standard_normal((500, 1))
    assert abs(np.corrcoef(u[:, 0], u[:, 0] ** 2)[0, 1]) < 0.2
    assert ek.dcor_test(u, u**2, n_perm=200, seed=0).p_value < 0.01


def test_dcor_test_errors():
    u = np.zeros((30, 1))
    with pytest.raises(ValueError):
        ek.dcor_test(u, u, n_perm=19)
    with pytest.raises(ValueError):
        ek.dcor_test(u[:10], u[:10])


def test_dcor_test_is_seeded():
    rng = np.random.default_rng(9)
    u, v = rng.standard_normal((60, 1)), rng.standard_normal((60, 1))
    assert ek.dcor_test(u, v, 50, seed=3) == ek.dcor_test(u, v, 50, seed=3)


def test_battery_statistics_match_pairwise_dcor():
    rng = np.random.default_rng(10)
    blocks = [rng.standard_normal((60, 1)) for _ in range(4)]
    blocks[3] = blocks[0] ** 2
    stat, pval = ek.dcor_battery(blocks, n_perm=50, seed=0)
    for i in range(4):
        for j in range(i + 1, 4):
            assert stat[i, j] == pytest.approx(ek.dcor(blocks[i], blocks[j]), abs=1e-12)
            assert stat[j, i] == stat[i, j]
    assert pval[0, 3] == pytest.approx(1 / 51)


@pytest.mark.slow
def test_dcor_p_values_are_calibrated_under_independence():
    pvals = []
    for seed in range(200):
        rng = np.random.default_rng(seed)
        u, v = rng.standard_normal((500, 1)), rng.standard_normal((500, 1))
        pvals.append(ek.dcor_test(u, v, n_perm=100, seed=seed).p_value)
    assert stats.kstest(pvals, "uniform").pvalue > 0.01


# -- multiple testing and uniformity ------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_holm_matches_textbook_loop(p):
    np.testing.assert_allclose(ek.holm(p), oracles.holm_reference(p), atol=1e-15)


def test_ks_on_grid_hugs_the_diagonal():
    n = 500
    stat, _ = ek.ks_uniformity((np.arange(n) + 0.5) / n)
    assert stat <= 1 / n


def test_ks_calibration_on_uniform_samples():
    passes = sum(ek.ks_uniformity(np.random.default_rng(s).uniform(size=1000))[1] > 0.01 for s in range(100))
    assert passes >= 98


def test_ks_rejects_beta():
    x = np.random.default_rng(0).beta(2, 2, size=1000)
    assert ek.ks_uniformity(x)[1] < 0.001


def test_ks_rejects_out_of_range_values():
    with pytest.raises(ValueError):
        ek.ks_uniformity([0.2, 1.5])
