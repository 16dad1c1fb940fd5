import math

import numpy as np
import pytest
from scipy import stats

from mvica import darmois as dm
from mvica import evalkit as ek


def _bivariate(rho, n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.multivariate_normal([0.0, 0.0], [[1.0, rho], [rho, 1.0]], n)


def test_one_dimensional_gaussian_stage_is_phi():
    x = np.random.default_rng(0).standard_normal((20_000, 1))
    stack = dm.fit_darmois(x, "gaussian")
    grid = np.linspace(-2.5, 2.5, 11)[:, None]
    # fitted mean/sd are within sampling error of 0/1
    np.testing.assert_allclose(dm.apply_darmois(stack, grid)[:, 0], stats.norm.cdf(grid[:, 0]), atol=0.01)


def test_second_stage_matches_the_gaussian_conditional():
    X = _bivariate(0.6, 5000, seed=1)
    stack = dm.fit_darmois(X, "gaussian")
    mu, cov = stack.mean, stack.cov
    rho = cov[0, 1] / math.sqrt(cov[0, 0] * cov[1, 1])
    a = (X[:, 0] - mu[0]) / math.sqrt(cov[0, 0])
    b = (X[:, 1] - mu[1]) / math.sqrt(cov[1, 1])
    Y = dm.apply_darmois(stack, X)
    np.testing.assert_allclose(Y[:, 1], stats.norm.cdf((b - rho * a) / math.sqrt(1 - rho**2)), atol=1e-12)


def test_knn_stages_match_the_gaussian_closed_form():
    # a wide neighbourhood with local linear location adjustment; the default k is meant for demos
    X = _bivariate(0.8, 10_000)
    closed = dm.apply_darmois(dm.fit_darmois(X, "gaussian"), X)
    knn = dm.apply_darmois(dm.fit_darmois(X, "knn", k=2500, adjust="location"), X)
    assert np.max(np.abs(knn - closed)) < 0.05


@pytest.mark.parametrize("kind", dm.KINDS)
def test_correlated_gaussian_becomes_independent_uniform(kind):
    X = _bivariate(0.8, 5000)
    Y = dm.apply_darmois(dm.fit_darmois(X, kind), X)
    assert Y.min() >= 0.0 and Y.max() <= 1.0
    for j in range(2):
        assert ek.ks_uniformity(Y[:, j])[1] > 0.01
    rows = np.random.default_rng(0).choice(5000, 1000, replace=False)
    assert ek.dcor_test(Y[rows, :1], Y[rows, 1:], n_perm=200, seed=0).p_value > 0.05


def test_shear_gives_a_second_solution_passing_the_same_battery():
    X = _bivariate(0.8, 5000)
    Y = dm.apply_darmois(dm.fit_darmois(X, "gaussian"), X)
    Z = dm.shear_automorphism(Y)
    assert np.max(np.abs(Z[:, 0] - Y[:, 0])) > 0.5  # structurally different
    rows = np.random.default_rng(1).choice(5000, 1000, replace=False)
    for out in (Y, Z):
        assert all(ek.ks_uniformity(out[:, j])[1] > 0.01 for j in range(2))
        assert ek.dcor_test(out[rows, :1], out[rows, 1:], n_perm=200, seed=2).p_value > 0.05


def test_refitting_a_warped_column_returns_its_ranks():
    X = _bivariate(0.5, 3000)
    Y = dm.apply_darmois(dm.fit_darmois(X, "gaussian"), X)
    warped = np.exp(3 * Y[:, :1])
    refit = dm.apply_darmois(dm.fit_darmois(warped, "knn"), warped)[:, 0]
    np.testing.assert_array_equal(stats.rankdata(refit), stats.rankdata(Y[:, 0]))


def test_one_dimensional_output_preserves_ranks():
    x = np.random.default_rng(3).standard_exponential((500, 1))
    for kind in dm.KINDS:
        y = dm.apply_darmois(dm.fit_darmois(x, kind), x)
        assert stats.spearmanr(x[:, 0], y[:, 0])[0] == pytest.approx(1.0)


def test_knn_first_stage_is_the_mid_rank_empirical_cdf():
    x = np.random.default_rng(4).standard_normal((400, 1))
    y = dm.apply_darmois(dm.fit_darmois(x, "knn"), x)[:, 0]
    np.testing.assert_allclose(y, (stats.rankdata(x[:, 0]) - 0.5) / 400)


def test_out_of_support_inputs_are_clamped_with_a_warning():
    X = _bivariate(0.3, 500)
    stack = dm.fit_darmois(X, "knn")
    probe = np.array([[100.0, 0.0], [0.0, 0.0]])
    with pytest.warns(RuntimeWarning, match="1 values"):
        Y, count = dm.apply_darmois(stack, probe, return_clamped=True)
    assert count == 1 and 0.0 <= Y.min() and Y.max() <= 1.0


def test_singular_covariance_is_rejected():
    x = np.random.default_rng(5).standard_normal(300)
    with pytest.raises(ValueError, match="singular"):
        dm.fit_darmois(np.c_[x, 2 * x], "gaussian")


def test_fit_errors():
    X = _bivariate(0.3, 50)
    with pytest.raises(ValueError, match="100 rows"):
        dm.fit_darmois(X, "knn")
    with pytest.raises(ValueError, match="permutation"):
        dm.fit_darmois(X, "gaussian", order=(0, 0))
    with pytest.raises(ValueError, match="kind"):
        dm.fit_darmois(X, "histogram")
    with pytest.raises(ValueError, match="non-finite"):
        dm.fit_darmois(np.array([[np.nan, 1.0]] * 200), "knn")


def test_order_flag_gives_a_different_valid_solution():
    X = _bivariate(0.8, 5000)
    a = dm.apply_darmois(dm.fit_darmois(X, "gaussian"), X)
    b = dm.apply_darmois(dm.fit_darmois(X, "gaussian", order=(1, 0)), X)
    # the first transformed column is a plain marginal CDF in each case
    assert stats.spearmanr(a[:, 0], X[:, 0])[0] == pytest.approx(1.0)
    assert stats.spearmanr(b[:, 1], X[:, 1])[0] == pytest.approx(1.0)
    assert np.max(np.abs(a - b)) > 0.5
    assert all(ek.ks_uniformity(b[:, j])[1] > 0.01 for j in range(2))


def test_default_neighbourhood_size():
    assert dm.default_k(10_000) == 100 and dm.default_k(101) == 11 and dm.default_k(3) == 2
