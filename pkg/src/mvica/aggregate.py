"""Combining many views: alignment, the multi-view mean and its residuals.

Each view ``i`` yields features ``F_i = k_i(s + n_i)`` with an unknown
per-component monotone gauge ``k_i``.  For candidate inverse gauges ``e_i``

    Omega = mean_i e_i(F_i),        R_i = e_i(F_i) - Omega.

When ``e_i`` inverts ``k_i`` up to one shared affine map, ``Omega`` tends to
the source and ``R_i`` to the view's noise.  Properties the true inverse
gauges must have (bounded variance, finite mean, residuals pairwise
independent, zero-mean and independent of the source) are checked by
:func:`verify_gauge_conditions` and used as penalties by
:func:`search_gauges`.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment, minimize

from . import evalkit
from .nnet import autodiff as ad

MIN_ROWS_VERIFY = 200
DEFAULT_KNOTS = 16
SLOPE_EPS = 1e-3
DEPENDENCE_THRESHOLD = 0.1
TIE_TOL = 1e-3
CONDITIONS = (
    "variance_bound",
    "omega_finite",
    "residual_pairwise_independence",
    "residual_zero_mean",
    "residual_source_independence",
)


# ---------------------------------------------------------------------------
# gauges


class GaugeFunction:
    """Strictly increasing piecewise-linear map with linear extrapolation.

    ``e(x) = offset + sum_j slope_j * ramp_j(x)``; the first and last ramps
    extend past the outer knots so the map is defined on the whole line.
    """

    def __init__(self, knots, slopes, offset=0.0):
        knots = np.asarray(knots, dtype=float)
        slopes = np.asarray(slopes, dtype=float)
        if knots.ndim != 1 or knots.size < 2:
            raise ValueError("need at least two knots")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly ascending")
        if slopes.shape != (knots.size - 1,):
            raise ValueError(f"need {knots.size - 1} slopes for {knots.size} knots")
        if not np.all(np.isfinite(slopes)) or np.any(slopes <= 0):
            raise ValueError("gauge slopes must be positive (strictly increasing map)")
        self.knots, self.slopes, self.offset = knots, slopes, float(offset)
        self.values = self.offset + np.concatenate([[0.0], np.cumsum(slopes * np.diff(knots))])

    @classmethod
    def affine(cls, scale=1.0, shift=0.0, lo=-1.0, hi=1.0):
        if scale <= 0:
            raise ValueError("affine gauge needs a positive scale")
        return cls([lo, hi], [scale], scale * lo + shift)

    @classmethod
    def identity(cls):
        return cls.affine()

    @property
    def n_knots(self):
        return self.knots.size

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = self.offset + ramp_basis(x.ravel(), self.knots) @ self.slopes
        return out.reshape(x.shape) if x.ndim else float(out[0])

    def inverse(self, y):
        y = np.asarray(y, dtype=float)
        k, v = self.knots, self.values
        out = np.interp(y, v, k)
        lo, hi = y < v[0], y > v[-1]
        out = np.where(lo, k[0] + (y - v[0]) / self.slopes[0], out)
        out = np.where(hi, k[-1] + (y - v[-1]) / self.slopes[-1], out)
        return out

    def __repr__(self):
        return f"GaugeFunction(knots={self.knots.size}, offset={self.offset:.4g})"


def ramp_basis(x, knots):
    """Columns ``ramp_j(x)`` so that a gauge is ``offset + basis @ slopes``.

    ``ramp_j`` rises with unit slope across segment ``j``; the first segment
    continues to -inf and the last to +inf.  At ``knots[0]`` all ramps are 0.
    """
    x = np.asarray(x, dtype=float)
    lo, hi = knots[:-1], knots[1:]
    r = np.clip(x[:, None], lo, hi) - lo
    r[:, 0] = np.minimum(x, hi[0]) - lo[0]
    r[:, -1] = np.maximum(x, lo[-1]) - lo[-1] if knots.size > 2 else x - lo[0]
    return r


def quantile_knots(x, n_knots=DEFAULT_KNOTS):
    """Knots at evenly spaced quantiles of ``x`` (duplicates removed)."""
    k = np.unique(np.quantile(np.asarray(x, dtype=float), np.linspace(0, 1, n_knots)))
    if k.size < 2:
        raise ValueError("feature is constant; no gauge can be fitted")
    return k


def _apply_gauge(gauge, col):
    return np.asarray(gauge(col), dtype=float).reshape(col.shape)


def _check_monotone(values, col, where):
    order = np.argsort(col, kind="stable")
    xs, ys = col[order], values[order]
    dx, dy = np.diff(xs), np.diff(ys)
    if np.any(dy[dx > 0] <= 0) or not np.all(np.isfinite(ys)):
        raise ValueError(f"gauge for {where} is not strictly increasing on the observed features")


def _gauge_for(gauges, view, comp):
    g = gauges[view]
    if isinstance(g, (list, tuple)):
        return g[comp]
    return g


def apply_gauges(features, gauges):
    """``e_i(F_i)`` for every view, shape ``(N, n, D)``."""
    F = _stack(features)
    N, n, D = F.shape
    if len(gauges) != N:
        raise ValueError(f"need one gauge (or list of D gauges) per view: {len(gauges)} != {N}")
    E = np.empty_like(F)
    for i in range(N):
        for d in range(D):
            col = F[i, :, d]
            vals = _apply_gauge(_gauge_for(gauges, i, d), col)
            _check_monotone(vals, col, f"view {i}, component {d}")
            E[i, :, d] = vals
    return E


def _stack(features):
    F = np.stack([np.asarray(f, dtype=float).reshape(len(f), -1) for f in features])
    if F.shape[0] < 2:
        raise ValueError("need at least two views")
    return F


# ---------------------------------------------------------------------------
# alignment


@dataclass(frozen=True)
class Alignment:
    permutation: np.ndarray  # candidate column matched to each reference column
    signs: np.ndarray
    scores: np.ndarray  # matched |Spearman|
    same: np.ndarray  # scores above the dependence threshold

    def apply(self, candidate):
        return np.asarray(candidate, dtype=float)[:, self.permutation] * self.signs


def _best_assignment(score, forbidden=()):
    s = score.copy()
    for r, c in forbidden:
        s[r, c] = -1e9
    rows, cols = linear_sum_assignment(s, maximize=True)
    perm = np.empty(score.shape[0], dtype=int)
    perm[rows] = cols
    return perm, float(score[rows, cols].sum()) if not forbidden else float(s[rows, cols].sum())


def align_views(reference, candidate, threshold=DEPENDENCE_THRESHOLD, tie_tol=TIE_TOL) -> Alignment:
    """Match candidate components to reference components by |Spearman|.

    Raises when a different matching scores within ``tie_tol`` of the best
    one, naming the reference components whose partner is ambiguous.
    """
    ref = np.asarray(reference, dtype=float)
    cand = np.asarray(candidate, dtype=float)
    if ref.shape != cand.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {cand.shape}")
    rho = evalkit.spearman_matrix(ref, cand, names=("reference", "candidate"))
    dep = np.abs(rho)
    perm, best = _best_assignment(dep)
    D = dep.shape[0]
    # second-best matching: forbid each edge of the best one in turn
    for r in range(D):
        alt, total = _best_assignment(dep, [(r, perm[r])])
        if best - total <= tie_tol:
            tied = sorted(int(j) for j in np.flatnonzero(alt != perm))
            raise ValueError(f"ambiguous alignment: components {tied} have tied matchings")
    signs = np.sign(rho[np.arange(D), perm])
    signs[signs == 0] = 1.0
    scores = dep[np.arange(D), perm]
    return Alignment(perm, signs, scores, scores > threshold)


# ---------------------------------------------------------------------------
# aggregation and the condition battery


@dataclass
class AggregationResult:
    omega: np.ndarray  # (n, D)
    residuals: np.ndarray  # (N, n, D)
    transformed: np.ndarray  # e_i(F_i), (N, n, D)
    conditions: dict = field(default_factory=dict)
    alpha: np.ndarray | None = None
    beta: np.ndarray | None = None
    fit_r2: np.ndarray | None = None

    @property
    def n_views(self):
        return self.residuals.shape[0]

    def condition_rows(self):
        return [(name, c["verdict"], c["p_value"]) for name, c in self.conditions.items()]


def affine_fit(y, x):
    """Per-column least squares ``y ~ alpha * x + beta``; returns (alpha, beta, R^2)."""
    y, x = np.asarray(y, float), np.asarray(x, float)
    y = y.reshape(len(y), -1)
    x = x.reshape(len(x), -1)
    xc, yc = x - x.mean(0), y - y.mean(0)
    alpha = np.sum(xc * yc, 0) / np.sum(xc * xc, 0)
    beta = y.mean(0) - alpha * x.mean(0)
    resid = yc - alpha * xc
    r2 = 1.0 - np.sum(resid**2, 0) / np.sum(yc**2, 0)
    return alpha, beta, r2


def aggregate_views(features: Sequence, gauges, truth=None, K=None, n_perm=200, seed=0,
                    max_rows=500, verify=True, pairwise="auto") -> AggregationResult:
    """Form ``Omega`` and residuals for aligned per-view features under ``gauges``.

    ``gauges`` holds one entry per view: a vectorized callable used for every
    component, or a list of ``D`` callables.  With ``truth`` the affine fit
    ``Omega ~ alpha * s + beta`` is reported and the source-independence check
    uses the true sources.  The condition battery runs when ``verify`` and
    there are enough rows; ``K=None`` leaves the variance bound unchecked.
    """
    E = apply_gauges(features, gauges)
    omega = E.mean(axis=0)
    result = AggregationResult(omega, E - omega, E)
    if truth is not None:
        s = np.asarray(truth, dtype=float).reshape(omega.shape[0], -1)
        result.alpha, result.beta, result.fit_r2 = affine_fit(omega, s)
    if verify and omega.shape[0] >= MIN_ROWS_VERIFY:
        result.conditions = verify_gauge_conditions(result, K, truth=truth, n_perm=n_perm, seed=seed,
                                                    max_rows=max_rows, pairwise=pairwise)
    return result


def _subsample(n, max_rows, seed):
    if n <= max_rows:
        return np.arange(n)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(31,)))
    return np.sort(rng.choice(n, max_rows, replace=False))


def verify_gauge_conditions(result: AggregationResult, K=None, truth=None, n_perm=200, seed=0,
                            max_rows=500, level=0.05, pairwise="auto"):
    """Check the five gauge conditions on an aggregation result.

    * variance_bound: every sample variance of ``e_i(F_i)`` is at most ``K``.
    * omega_finite: ``Omega`` is finite on every row.
    * residual_pairwise_independence: dCor permutation tests between all
      residual pairs, Holm-adjusted, all above ``level``.  Residuals around
      the common mean share it and correlate at -1/(N-1) even for the true
      gauges, so ``pairwise="split"`` (the ``"auto"`` choice when N >= 4)
      takes the residuals of views i and j against the means of two disjoint
      halves of the remaining views; ``"plain"`` tests ``R_i`` as defined.
    * residual_zero_mean: ``|mean R_i| < 3 * stderr`` for every view and component.
    * residual_source_independence: dCor(R_i, s) with ground truth, else
      dCor(R_i, Omega); Holm-adjusted over views.

    Permutation tests use at most ``max_rows`` seeded rows.
    """
    R, omega, E = result.residuals, result.omega, result.transformed
    N, n, D = R.shape
    if n < MIN_ROWS_VERIFY:
        raise ValueError(f"need at least {MIN_ROWS_VERIFY} rows for the permutation tests, got {n}")
    out = {}
    variances = E.var(axis=1, ddof=1)
    vmax = float(variances.max())
    out["variance_bound"] = {
        "verdict": None if K is None else bool(vmax <= K),
        "p_value": float("nan"),
        "statistic": vmax,
    }
    out["omega_finite"] = {"verdict": bool(np.all(np.isfinite(omega))), "p_value": float("nan"), "statistic": 0.0}

    rows = _subsample(n, max_rows, seed)
    if pairwise == "auto":
        pairwise = "split" if N >= 4 else "plain"
    iu = np.triu_indices(N, 1)
    if pairwise == "plain":
        stat, pval = evalkit.dcor_battery([R[i, rows] for i in range(N)], n_perm, seed=seed)
        stats_, pvals = stat[iu], pval[iu]
    elif pairwise == "split":
        if N < 4:
            raise ValueError(f"split residuals need at least 4 views, got {N}")
        stats_, pvals = [], []
        for i, j in zip(*iu):
            rest = [k for k in range(N) if k not in (i, j)]
            ri = E[i, rows] - E[rest[0::2]][:, rows].mean(axis=0)
            rj = E[j, rows] - E[rest[1::2]][:, rows].mean(axis=0)
            rep = evalkit.dcor_test(ri, rj, n_perm, seed=(seed, int(i), int(j)))
            stats_.append(rep.statistic)
            pvals.append(rep.p_value)
    else:
        raise ValueError(f"pairwise must be 'auto', 'plain' or 'split', got {pairwise!r}")
    adj = evalkit.holm(pvals)
    pmin = float(adj.min())
    out["residual_pairwise_independence"] = {
        "verdict": bool(pmin > level),
        "p_value": pmin,
        "statistic": float(np.max(stats_)),
        "mode": pairwise,
        # Holm over m tests cannot go below m / (n_perm + 1): above level the check is vacuous
        "min_attainable_p": min(1.0, len(pvals) / (n_perm + 1)),
    }

    mean = R.mean(axis=1)
    stderr = R.std(axis=1, ddof=1) / math.sqrt(n)
    tmax = float(np.max(np.abs(mean) / np.where(stderr > 0, stderr, np.inf)))
    out["residual_zero_mean"] = {
        "verdict": bool(np.all(np.abs(mean) < 3 * stderr) or np.all(np.abs(mean) <= 1e-12)),
        "p_value": float("nan"),
        "statistic": tmax,
    }

    target = omega if truth is None else np.asarray(truth, dtype=float).reshape(n, -1)
    src_p, src_stat = [], []
    for i in range(N):
        rep = evalkit.dcor_test(R[i, rows], target[rows], n_perm, seed=(seed, N + i, 0))
        src_p.append(rep.p_value)
        src_stat.append(rep.statistic)
    adj = evalkit.holm(src_p)
    out["residual_source_independence"] = {
        "verdict": bool(adj.min() > level),
        "p_value": float(adj.min()),
        "statistic": float(max(src_stat)),
        "mode": "evaluation" if truth is not None else "blind",
    }
    return out


# ---------------------------------------------------------------------------
# gauge search


def _objective_graph(theta, bases, penalty_weight):
    """Scale-free penalty for one component.

    ``theta`` is a (P, N) Tensor: row 0 the offsets, the rest slopes;
    ``bases[i]`` is ``[1, ramps_i]`` so ``e_i(F_i) = bases[i] @ theta[:, i]``.
    """
    N = len(bases)
    n = bases[0].shape[0]
    E = ad.concat_cols([ad.matmul(B, ad.take_cols(theta, i)) for i, B in enumerate(bases)])
    omega = ad.matmul(E, np.full((N, 1), 1.0 / N))
    R = ad.sub(E, ad.matmul(omega, np.ones((1, N))))
    oc = ad.sub(omega, ad.mean(omega))
    var_o = ad.mean(ad.square(oc))
    agree = ad.div(ad.mean(ad.square(R)), var_o)

    z = ad.div(oc, ad.sqrt(var_o))
    z2 = ad.square(z)
    H = ad.concat_cols([z, ad.sub(z2, 1.0), ad.sub(ad.mul(z2, z), ad.mul(z, 3.0))])
    Hc = ad.sub(H, ad.mean(H, axis=0))
    Hn = ad.div(Hc, ad.sqrt(ad.mean(ad.square(Hc), axis=0)))
    HnT = ad.transpose(Hn)
    vr = ad.mean(ad.square(R), axis=0)  # (1, N)
    # residual mean and spread should not vary with Omega
    m1 = ad.mul(ad.matmul(HnT, R), 1.0 / n)
    dep = ad.sum(ad.div(ad.square(m1), vr))
    m2 = ad.mul(ad.matmul(HnT, ad.square(R)), 1.0 / n)
    het = ad.sum(ad.div(ad.square(m2), ad.square(vr)))
    bias = ad.sum(ad.div(ad.square(ad.mean(R, axis=0)), vr))
    return ad.add(agree, ad.mul(ad.add(ad.add(dep, het), bias), penalty_weight / N))


@dataclass
class GaugeSearchResult:
    gauges: list  # gauges[view][component]
    objective: np.ndarray  # best penalty per component
    starts: int


def search_gauges(features, n_knots=DEFAULT_KNOTS, n_starts=4, seed=0, penalty_weight=1.0,
                  max_iter=500) -> GaugeSearchResult:
    """Condition-penalized search for inverse gauges, one component at a time.

    Minimizes the residual-to-Omega variance ratio plus penalties on the
    dependence of residual mean and spread on Omega, over monotone
    piecewise-linear gauges with quantile knots (L-BFGS-B, slopes bounded
    below, several seeded starts).  The shared affine freedom is fixed
    afterwards so pooled outputs keep the pooled feature mean and spread.
    """
    F = _stack(features)
    N, n, D = F.shape
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(37,)))
    gauges = [[None] * D for _ in range(N)]
    best_obj = np.empty(D)
    for d in range(D):
        knots = [quantile_knots(F[i, :, d], n_knots) for i in range(N)]
        bases = [np.column_stack([np.ones(n), ramp_basis(F[i, :, d], knots[i])]) for i in range(N)]
        P = max(b.shape[1] for b in bases)
        if any(b.shape[1] != P for b in bases):
            raise ValueError("tied quantiles left views with different knot counts; use fewer knots")
        scale = np.array([1.0 / F[i, :, d].std() for i in range(N)])
        init = np.vstack([np.zeros(N), np.tile(scale, (P - 1, 1))])
        lower = np.vstack([np.full(N, -np.inf), np.tile(SLOPE_EPS * scale, (P - 1, 1))])
        bounds = list(zip(lower.ravel(), np.full(lower.size, np.inf)))

        def fun(x):
            theta = ad.Tensor(x.reshape(P, N))
            J = _objective_graph(theta, bases, penalty_weight)
            J.backward()
            return float(J.value), theta.grad.ravel().copy()

        best = None
        for k in range(n_starts):
            x0 = init.copy()
            if k:
                x0[1:] *= np.exp(0.3 * rng.standard_normal(x0[1:].shape))
            res = minimize(fun, x0.ravel(), jac=True, method="L-BFGS-B", bounds=bounds,
                           options={"maxiter": max_iter})
            if best is None or res.fun < best.fun:
                best = res
        theta = best.x.reshape(P, N)
        best_obj[d] = best.fun
        E = np.column_stack([bases[i] @ theta[:, i] for i in range(N)])
        a = F[:, :, d].std() / E.std()
        b = F[:, :, d].mean() - a * E.mean()
        for i in range(N):
            slopes = np.maximum(theta[1:, i], SLOPE_EPS * scale[i])
            gauges[i][d] = GaugeFunction(knots[i], a * slopes, a * theta[0, i] + b)
    return GaugeSearchResult(gauges, best_obj, n_starts)


# ---------------------------------------------------------------------------
# low-noise sweep


@dataclass(frozen=True)
class SweepRow:
    scale: float
    mcc: float
    status: str


def max_workers():
    """Worker cap from ``MVICA_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("MVICA_THREADS", "1")))
    except ValueError:
        raise ValueError("MVICA_THREADS must be a positive integer") from None


def _sweep_job(args):
    spec, scale, n_samples, train_cfg, model_kw, seed = args
    from . import contrastive, synthgen

    try:
        sp = spec.with_noise_scale(0, scale * spec.views[0].corrupter.noise_scale)
        ds = synthgen.sample_dataset(sp, n_samples)
        model = contrastive.RegressionModel("FORM_C", ds.dim, seed=seed, **model_kw)
        res = contrastive.train(model, ds, train_cfg)
        te = res.test_rows
        score = evalkit.mcc(model.features(ds.views[0][te], 1), ds.sources[te]).mean
        return SweepRow(scale, score, "ok")
    except Exception as exc:  # one failed training must not stop the sweep
        return SweepRow(scale, float("nan"), f"failed: {type(exc).__name__}: {exc}")


def low_noise_sweep(spec, scales=(1.0, 0.5, 0.25, 0.125, 0.0), n_samples=10_000, train_config=None,
                    model_kw=None, seed=0, corrupter=None, s_grid=None) -> list[SweepRow]:
    """Train one FORM_C model per view-1 noise multiplier and score ``h_1`` against the sources.

    Every run reuses the same unit noise draws, so scale ``k`` multiplies one
    fixed noise realization.  The view-1 corrupter (or ``corrupter`` when
    given) must pass :func:`~mvica.synthgen.check_corrupter_conditions`.
    """
    from . import contrastive, synthgen

    gate = corrupter if corrupter is not None else spec.views[0].corrupter
    grid = np.linspace(-3, 3, 61) if s_grid is None else s_grid
    check = synthgen.check_corrupter_conditions(gate, grid)
    if not check.passes:
        raise ValueError(
            f"view-1 corrupter fails the low-noise preconditions (max dg/dn={np.max(check.bound_a):.3g}, "
            f"min dg/ds={np.min(check.min_ds):.3g}); refusing to sweep"
        )
    cfg = train_config or contrastive.TrainConfig()
    seeds = np.random.SeedSequence(seed).generate_state(len(scales))
    jobs = [(spec, float(k), n_samples, cfg, dict(model_kw or {}), int(sd)) for k, sd in zip(scales, seeds)]
    workers = min(max_workers(), len(jobs))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_sweep_job, jobs))
    return [_sweep_job(j) for j in jobs]


def trend_ok(scales, values, tol=0.02) -> bool:
    """Values never drop by more than ``tol`` as the noise multiplier shrinks."""
    order = np.argsort(-np.asarray(scales, dtype=float))
    v = np.asarray(values, dtype=float)[order]
    return bool(np.all(np.isfinite(v)) and np.all(np.maximum.accumulate(v) - v <= tol))
