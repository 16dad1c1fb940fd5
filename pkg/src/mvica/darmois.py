"""Darmois construction: recursive conditional CDFs.

Stage ``m`` maps ``x_m`` to ``y_m = P(X_m <= x_m | y_1, ..., y_{m-1})``.  The
outputs are independent and uniform on the unit cube whatever the data,
which is why independence alone cannot identify the sources of a single
nonlinearly mixed view.

Since ``y_1..y_{m-1}`` is an invertible function of ``x_1..x_{m-1}``, the
knn estimator conditions on the (standardized) earlier inputs directly.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import ndtr

KINDS = ("gaussian", "knn")
ADJUSTMENTS = ("none", "location", "location-scale")
MIN_ROWS_KNN = 100
_CHUNK = 512


def default_k(n: int) -> int:
    """Neighbourhood size for the knn kind: ``ceil(sqrt(n))``."""
    return min(n, int(math.ceil(math.sqrt(n))))


def _midrank_cdf(x, sample):
    """Mid-rank empirical CDF of sorted ``sample`` at ``x``: (#less + #equal / 2) / n."""
    lo = np.searchsorted(sample, x, side="left")
    hi = np.searchsorted(sample, x, side="right")
    return (lo + hi) / (2.0 * sample.size)


@dataclass(frozen=True)
class ConditionalCdfStack:
    kind: str
    order: tuple
    lo: np.ndarray
    hi: np.ndarray
    # gaussian kind
    mean: np.ndarray | None = None
    cov: np.ndarray | None = None
    # knn kind: training columns (in fitted order) and their standardized copy
    train_x: np.ndarray | None = None
    train_ctx: np.ndarray | None = None
    k: int = 0
    adjust: str = "none"

    @property
    def dim(self):
        return len(self.order)


def _gaussian_stage(mean, cov, m, xs):
    """Conditional mean/sd of column ``m`` given columns ``< m`` (all in fitted order)."""
    if m == 0:
        return np.full(xs.shape[0], mean[0]), math.sqrt(cov[0, 0])
    s12 = cov[m, :m]
    s11 = cov[:m, :m]
    coef = np.linalg.solve(s11, s12)
    mu = mean[m] + (xs[:, :m] - mean[:m]) @ coef
    var = cov[m, m] - s12 @ coef
    return mu, math.sqrt(var)


def _knn_stage(stack, m, x, context):
    """kNN conditional CDF of fitted column ``m`` at the query rows.

    Neighbours are found in the standardized earlier columns; the output is
    the mid-rank empirical CDF of their values, optionally moved to the
    query's context first (see ``_adjust``).
    """
    tx = stack.train_x[:, m]
    if m == 0:
        return _midrank_cdf(x, np.sort(tx))
    ctx = stack.train_ctx[:, :m]
    tree = cKDTree(ctx)
    out = np.empty(x.shape[0])
    for a in range(0, x.shape[0], _CHUNK):
        q = context[a:a + _CHUNK, :m]
        _, idx = tree.query(q, k=stack.k)
        idx = idx.reshape(q.shape[0], -1)
        nb_x = tx[idx]
        moved = nb_x if stack.adjust == "none" else _adjust(stack.adjust, ctx[idx] - q[:, None, :], nb_x)
        xq = x[a:a + _CHUNK, None]
        less = np.sum(moved < xq, axis=1)
        equal = np.sum(moved == xq, axis=1)
        out[a:a + _CHUNK] = (less + 0.5 * equal) / stack.k
    return out


def _adjust(mode, d, nb_x):
    """Move neighbour values to the query context with a local linear fit of
    location (and of absolute deviation for ``location-scale``)."""
    design = np.concatenate([np.ones(d.shape[:2] + (1,)), d], axis=2)
    loc = _batched_lstsq(design, nb_x)
    resid = nb_x - np.einsum("bkp,bp->bk", design, loc)
    if mode == "location":
        return loc[:, :1] + resid
    spread = _batched_lstsq(design, np.abs(resid))
    floor = 0.1 * np.mean(np.abs(resid), axis=1, keepdims=True) + 1e-300
    scale_nb = np.maximum(np.einsum("bkp,bp->bk", design, spread), floor)
    scale_q = np.maximum(spread[:, :1], floor)
    return loc[:, :1] + resid * (scale_q / scale_nb)


def _batched_lstsq(design, target):
    gram = np.einsum("bki,bkj->bij", design, design)
    rhs = np.einsum("bki,bk->bi", design, target)
    gram += 1e-10 * np.eye(gram.shape[1])[None] * np.trace(gram, axis1=1, axis2=2)[:, None, None]
    return np.linalg.solve(gram, rhs[..., None])[..., 0]


def _validate(X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[1] < 1:
        raise ValueError("X must be an n x D matrix")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    return X


def fit_darmois(X, kind="gaussian", k=None, order=None, adjust="none") -> ConditionalCdfStack:
    """Fit the conditional-CDF stack.  ``order`` permutes which column is transformed first."""
    X = _validate(X)
    n, D = X.shape
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}; choose from {KINDS}")
    order = tuple(range(D)) if order is None else tuple(int(o) for o in order)
    if sorted(order) != list(range(D)):
        raise ValueError(f"order {order} is not a permutation of range({D})")
    Xo = X[:, order]
    lo, hi = Xo.min(axis=0), Xo.max(axis=0)
    if kind == "gaussian":
        mean = Xo.mean(axis=0)
        cov = np.atleast_2d(np.cov(Xo, rowvar=False))
        ev = np.linalg.eigvalsh(cov)
        if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
            raise ValueError("covariance is singular; the gaussian kind needs a positive-definite covariance")
        return ConditionalCdfStack(kind, order, lo, hi, mean=mean, cov=cov)
    if n < MIN_ROWS_KNN:
        raise ValueError(f"knn kind needs at least {MIN_ROWS_KNN} rows, got {n}")
    k = default_k(n) if k is None else int(k)
    if not 2 <= k <= n:
        raise ValueError(f"k must be in [2, {n}]")
    mu, sd = Xo.mean(axis=0), Xo.std(axis=0)
    if np.any(sd == 0):
        raise ValueError(f"column {order[int(np.argmin(sd))]} is constant")
    if adjust not in ADJUSTMENTS:
        raise ValueError(f"unknown adjustment {adjust!r}; choose from {ADJUSTMENTS}")
    return ConditionalCdfStack(kind, order, lo, hi, train_x=Xo, train_ctx=(Xo - mu) / sd, k=k,
                               mean=mu, cov=np.diag(sd**2), adjust=adjust)


def apply_darmois(stack: ConditionalCdfStack, X, return_clamped=False):
    """Transform rows of ``X`` to ``[0, 1]^D`` (columns in the input's order).

    Values outside the fitted range are clamped to it; the count is reported
    through a warning (and returned when ``return_clamped``).
    """
    X = _validate(X)
    if X.shape[1] != stack.dim:
        raise ValueError(f"expected {stack.dim} columns, got {X.shape[1]}")
    Xo = X[:, stack.order]
    clipped = np.clip(Xo, stack.lo, stack.hi)
    n_clamped = int(np.sum(clipped != Xo))
    if n_clamped:
        warnings.warn(f"{n_clamped} values outside the fitted support were clamped", RuntimeWarning, stacklevel=2)
    n, D = Xo.shape
    Y = np.empty((n, D))
    if stack.kind == "gaussian":
        for m in range(D):
            mu, sd = _gaussian_stage(stack.mean, stack.cov, m, clipped)
            Y[:, m] = ndtr((clipped[:, m] - mu) / sd)
    else:
        context = (clipped - stack.mean) / np.sqrt(np.diag(stack.cov))
        for m in range(D):
            Y[:, m] = _knn_stage(stack, m, clipped[:, m], context)
    Y = np.clip(Y, 0.0, 1.0)
    out = np.empty_like(Y)
    out[:, stack.order] = Y
    return (out, n_clamped) if return_clamped else out


def shear_automorphism(Y):
    """Measure-preserving map of the unit square: ``(u, v) -> (u + v mod 1, v)``."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[1] != 2:
        raise ValueError("the shear automorphism acts on two columns")
    return np.column_stack([np.mod(Y[:, 0] + Y[:, 1], 1.0), Y[:, 1]])


def fold_mixing_weights():
    """Two-layer weights whose leaky mixing makes every observed coordinate
    non-monotone in both sources: a negative control that defeats any
    single-view recovery-by-independence."""
    w1 = np.array([[1.0, 0.8], [-0.8, -1.0]])
    w2 = np.array([[1.0, 1.0], [1.0, -0.6]])
    return w1, w2
