"""Recovery scores and statistical tests.

Recovery is judged up to per-component monotone maps and a permutation, so
the score is rank based: the mean absolute Spearman correlation after an
optimal one-to-one matching of estimated to true components (MCC).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.optimize import linear_sum_assignment

from .tables import write_table

MIN_ROWS_MCC = 10
MIN_ROWS_DCOR = 20
MIN_PERMUTATIONS = 20


@dataclass(frozen=True)
class MccReport:
    permutation: np.ndarray  # permutation[i] = estimate column matched to truth column i
    scores: np.ndarray
    dependence: np.ndarray  # |Spearman|, rows = truth, cols = estimates

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))

    def summary(self) -> str:
        return f"mean_mcc={self.mean:.17g}"


@dataclass(frozen=True)
class IndependenceReport:
    statistic_tag: str
    statistic: float
    p_value: float
    n_permutations: int


def _as_2d(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"{name} must be a vector or matrix")
    return a


def spearman_matrix(a, b, names=("estimates", "truth")) -> np.ndarray:
    """Spearman correlations between every column of ``a`` and of ``b``."""
    ra = stats.rankdata(a, axis=0)
    rb = stats.rankdata(b, axis=0)
    for r, name in ((ra, names[0]), (rb, names[1])):
        sd = r.std(axis=0)
        bad = np.flatnonzero(sd == 0)
        if bad.size:
            raise ValueError(f"{name} column {int(bad[0])} is constant")
    ra = (ra - ra.mean(0)) / ra.std(0)
    rb = (rb - rb.mean(0)) / rb.std(0)
    return ra.T @ rb / ra.shape[0]


def match_components(dependence: np.ndarray) -> np.ndarray:
    """Row-to-column assignment maximizing the total of ``dependence``."""
    rows, cols = linear_sum_assignment(dependence, maximize=True)
    perm = np.empty(dependence.shape[0], dtype=int)
    perm[rows] = cols
    return perm


def mcc(estimates, truth) -> MccReport:
    est = _as_2d(estimates, "estimates")
    tru = _as_2d(truth, "truth")
    if est.shape != tru.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {tru.shape}")
    if est.shape[0] < MIN_ROWS_MCC:
        raise ValueError(f"need at least {MIN_ROWS_MCC} rows, got {est.shape[0]}")
    dep = np.abs(spearman_matrix(est, tru)).T
    perm = match_components(dep)
    scores = dep[np.arange(dep.shape[0]), perm]
    return MccReport(perm, scores, dep)


def write_mcc_report(path, report: MccReport, seed) -> str:
    rows = [(i, int(j), float(s)) for i, (j, s) in enumerate(zip(report.permutation, report.scores))]
    write_table(path, ("component", "matched_to", "score"), rows, seed)
    with open(path, "a") as fh:
        fh.write(f"# {report.summary()}\n")
    return str(path)


# ---------------------------------------------------------------------------
# distance correlation


def _u_centered(x):
    """U-centered pairwise distance matrix (zero diagonal)."""
    n = x.shape[0]
    d = np.sqrt(np.maximum(np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1), 0.0))
    row = d.sum(axis=1)
    total = row.sum()
    u = d - row[:, None] / (n - 2) - row[None, :] / (n - 2) + total / ((n - 1) * (n - 2))
    np.fill_diagonal(u, 0.0)
    return u


def _inner(a, b, n):
    return float(np.sum(a * b)) / (n * (n - 3))


def dcor(u, v) -> float:
    """Bias-corrected squared distance correlation (may be slightly negative under independence)."""
    u, v = _as_2d(u, "u"), _as_2d(v, "v")
    n = u.shape[0]
    if v.shape[0] != n:
        raise ValueError("u and v need the same number of rows")
    if n < 4:
        raise ValueError("bias-corrected dCor needs at least 4 rows")
    a, b = _u_centered(u), _u_centered(v)
    return _dcor_from(a, b, n)


def _dcor_from(a, b, n):
    aa, bb = _inner(a, a, n), _inner(b, b, n)
    if aa <= 0 or bb <= 0:
        return 0.0
    return _inner(a, b, n) / np.sqrt(aa * bb)


def _perm_rng(seed, k):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))


def dcor_test(u, v, n_perm=200, seed=0) -> IndependenceReport:
    """Permutation test of independence using the bias-corrected dCor.

    Permutation ``k`` reorders the rows of ``v`` with its own seeded stream,
    so results do not depend on evaluation order.
    """
    if n_perm < MIN_PERMUTATIONS:
        raise ValueError(f"n_perm must be at least {MIN_PERMUTATIONS}, got {n_perm}")
    u, v = _as_2d(u, "u"), _as_2d(v, "v")
    n = u.shape[0]
    if v.shape[0] != n:
        raise ValueError("u and v need the same number of rows")
    if n < MIN_ROWS_DCOR:
        raise ValueError(f"need at least {MIN_ROWS_DCOR} rows, got {n}")
    a, b = _u_centered(u), _u_centered(v)
    aa, bb = _inner(a, a, n), _inner(b, b, n)
    if aa <= 0 or bb <= 0:
        return IndependenceReport("dCor", 0.0, 1.0, n_perm)
    scale = 1.0 / np.sqrt(aa * bb)
    observed = _inner(a, b, n) * scale
    hits = 0
    for k in range(n_perm):
        p = _perm_rng(seed, k).permutation(n)
        if _inner(a, b[np.ix_(p, p)], n) * scale >= observed:
            hits += 1
    return IndependenceReport("dCor", float(observed), (1 + hits) / (n_perm + 1), n_perm)


def dcor_battery(blocks, n_perm=200, seed=0) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise dCor permutation tests among ``blocks`` (each n x p_i).

    For pair ``i < j`` the rows of block ``i`` are permuted; each permuted
    distance matrix is reused against every later block, so the cost is one
    permutation per block and draw rather than per pair.  Returns
    ``(statistics, p_values)`` as symmetric matrices with NaN diagonals.
    """
    if n_perm < MIN_PERMUTATIONS:
        raise ValueError(f"n_perm must be at least {MIN_PERMUTATIONS}, got {n_perm}")
    blocks = [_as_2d(b, f"block {k}") for k, b in enumerate(blocks)]
    n = blocks[0].shape[0]
    if any(b.shape[0] != n for b in blocks):
        raise ValueError("all blocks need the same number of rows")
    if n < MIN_ROWS_DCOR:
        raise ValueError(f"need at least {MIN_ROWS_DCOR} rows, got {n}")
    m = len(blocks)
    mats = [_u_centered(b) for b in blocks]
    norms = np.array([_inner(a, a, n) for a in mats])
    stat = np.full((m, m), np.nan)
    pval = np.full((m, m), np.nan)
    for i in range(m - 1):
        later = range(i + 1, m)
        scale = np.array([1.0 / np.sqrt(norms[i] * norms[j]) if norms[i] > 0 and norms[j] > 0 else 0.0
                          for j in later])
        stacked = np.stack([mats[j].ravel() for j in later])
        norm = scale / (n * (n - 3))
        obs = (stacked @ mats[i].ravel()) * norm
        hits = np.zeros(len(obs))
        for k in range(n_perm):
            p = _perm_rng((seed, i), k).permutation(n)
            hits += (stacked @ mats[i][np.ix_(p, p)].ravel()) * norm >= obs
        pv = np.where(scale > 0, (1 + hits) / (n_perm + 1), 1.0)
        for j, o, q in zip(later, obs, pv):
            stat[i, j] = stat[j, i] = o
            pval[i, j] = pval[j, i] = q
    return stat, pval


def holm(p_values) -> np.ndarray:
    """Holm step-down adjusted p-values (family-wise error control)."""
    p = np.asarray(p_values, dtype=float)
    m = p.size
    if m == 0:
        return p
    order = np.argsort(p, kind="stable")
    adj = np.maximum.accumulate((m - np.arange(m)) * p[order])
    out = np.empty(m)
    out[order] = np.minimum(adj, 1.0)
    return out


# ---------------------------------------------------------------------------
# uniformity


def ks_uniformity(x) -> tuple[float, float]:
    """One-sample KS test against U(0, 1); returns (statistic, asymptotic p-value)."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("empty sample")
    if not np.all(np.isfinite(x)) or x.min() < 0 or x.max() > 1:
        raise ValueError("values must lie in [0, 1]")
    res = stats.kstest(x, "uniform", method="asymp")
    return float(res.statistic), float(res.pvalue)
