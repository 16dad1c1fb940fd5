"""Sufficiently-distinct-views check for conditional log-density families.

A family supplies per-component functions ``alpha_i(y_i, t_i)``.  For a fixed
``y`` the witness vector at a probe ``t`` is

    w(y, t) = (alpha''_1, ..., alpha''_D, alpha'_1, ..., alpha'_D)

with derivatives taken in one argument (``t`` by default).  The family is
accepted at ``y`` when ``2D`` probes give linearly independent witnesses.
"""
from __future__ import annotations

import json

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import RectBivariateSpline
from scipy.linalg import qr
from scipy.stats import qmc

FAMILIES = ("gaussian", "quartic", "numeric")
MODES = ("closed-form", "central-difference")
PROBE_BOX = 3.0
H_FIRST = 1e-5
H_SECOND = 1e-4


@dataclass(frozen=True)
class CondLogDensityFamily:
    """Per-component conditional log-density ``alpha_i(y_i, t_i)``.

    ``gaussian``: ``-(t - y)^2 / (2 sigma_i^2)``.
    ``quartic``: ``-(t^2 y^2 + t^4 y^4) + log|y|`` (the last term is the
    log-normalizer in ``y`` and only matters when differentiating in ``y``).
    ``numeric``: ``fn(i, y, t)`` vectorized over ``y`` and ``t``; see
    :func:`numeric_family` and :func:`table_family`.
    """

    tag: str
    dim: int
    sigma: tuple = ()
    mode: str = "closed-form"
    fn: Callable | None = None
    fn_derivs: Callable | None = None
    caveats: tuple = ()

    def __post_init__(self):
        if self.tag not in FAMILIES:
            raise ValueError(f"unknown family {self.tag!r}; choose from {FAMILIES}")
        if self.mode not in MODES:
            raise ValueError(f"unknown derivative mode {self.mode!r}")
        if self.dim < 1:
            raise ValueError("dimension must be positive")
        if self.tag == "gaussian":
            sig = self.sigma or (1.0,) * self.dim
            if len(sig) != self.dim or min(sig) <= 0:
                raise ValueError("gaussian family needs one positive sigma per component")
            object.__setattr__(self, "sigma", tuple(float(s) for s in sig))
        if self.tag == "numeric" and self.fn is None:
            raise ValueError("numeric family needs a callable")

    def with_mode(self, mode):
        return CondLogDensityFamily(self.tag, self.dim, self.sigma, mode, self.fn, self.fn_derivs, self.caveats)

    def alpha(self, y, t):
        """Values ``alpha_i(y_i, t_i)`` for broadcastable ``y`` and ``t`` of last axis ``D``."""
        y, t = np.broadcast_arrays(np.asarray(y, float), np.asarray(t, float))
        if self.tag == "gaussian":
            return -((t - y) ** 2) / (2.0 * np.asarray(self.sigma) ** 2)
        if self.tag == "quartic":
            return -(t**2 * y**2 + t**4 * y**4) + np.log(np.abs(y))
        out = np.empty(y.shape)
        for i in range(self.dim):
            out[..., i] = self.fn(i, y[..., i], t[..., i])
        return out

    def _closed(self, y, t, slot):
        y, t = np.broadcast_arrays(np.asarray(y, float), np.asarray(t, float))
        if self.tag == "gaussian":
            s2 = np.asarray(self.sigma) ** 2
            d1 = (y - t) / s2 if slot == 2 else (t - y) / s2
            return d1, np.broadcast_to(-1.0 / s2, y.shape).copy()
        if self.tag == "quartic":
            if slot == 2:
                return -(2 * t * y**2 + 4 * t**3 * y**4), -(2 * y**2 + 12 * t**2 * y**4)
            return -(2 * t**2 * y + 4 * t**4 * y**3) + 1.0 / y, -(2 * t**2 + 12 * t**4 * y**2) - 1.0 / y**2
        if self.fn_derivs is None:
            raise ValueError("this numeric family has no analytic derivatives; use central-difference mode")
        d1, d2 = np.empty(y.shape), np.empty(y.shape)
        for i in range(self.dim):
            d1[..., i], d2[..., i] = self.fn_derivs(i, y[..., i], t[..., i], slot)
        return d1, d2

    def _central(self, y, t, slot):
        y, t = np.broadcast_arrays(np.asarray(y, float), np.asarray(t, float))

        def f(dh):
            return self.alpha(y + dh, t) if slot == 1 else self.alpha(y, t + dh)

        d1 = (f(H_FIRST) - f(-H_FIRST)) / (2 * H_FIRST)
        d2 = (f(H_SECOND) - 2 * f(0.0) + f(-H_SECOND)) / H_SECOND**2
        return d1, d2

    def derivatives(self, y, t, slot=2):
        if slot not in (1, 2):
            raise ValueError("slot must be 1 or 2")
        d1, d2 = self._closed(y, t, slot) if self.mode == "closed-form" else self._central(y, t, slot)
        return d1, d2


def gaussian_family(dim, sigma=None, mode="closed-form"):
    return CondLogDensityFamily("gaussian", dim, tuple(sigma) if sigma is not None else (), mode)


def quartic_family(dim, mode="closed-form"):
    return CondLogDensityFamily("quartic", dim, mode=mode)


def numeric_family(fn, dim, fn_derivs=None, mode="central-difference"):
    """Wrap ``fn(i, y, t) -> alpha_i`` (vectorized) as a family."""
    return CondLogDensityFamily("numeric", dim, mode=mode, fn=fn, fn_derivs=fn_derivs)


def table_family(y_grid, t_grid, values, mode="closed-form"):
    """Family from tabulated ``values[i, a, b] = alpha_i(y_grid[a], t_grid[b])``.

    Each component is a bicubic interpolating spline; closed-form mode uses
    the spline's own derivatives.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 2:
        values = values[None]
    if not np.all(np.isfinite(values)):
        raise ValueError("table contains non-finite values")
    splines = [RectBivariateSpline(y_grid, t_grid, v) for v in values]

    def fn(i, y, t):
        return splines[i].ev(y, t)

    def fn_derivs(i, y, t, slot):
        if slot == 2:
            return splines[i].ev(y, t, dy=1), splines[i].ev(y, t, dy=2)
        return splines[i].ev(y, t, dx=1), splines[i].ev(y, t, dx=2)

    return CondLogDensityFamily("numeric", values.shape[0], mode=mode, fn=fn, fn_derivs=fn_derivs)


def additive_noise_family(kind, dim, scale=1.0, mode="central-difference"):
    """``alpha(y, t) = log p_noise(t - y)`` for additive noise of the given kind and scale."""
    from scipy import stats

    dists = {"gaussian": stats.norm, "laplace": stats.laplace, "logistic": stats.logistic}
    if kind not in dists:
        raise ValueError(f"noise kind {kind!r} has no smooth log-density on the real line")
    dist = dists[kind](scale=scale)
    return numeric_family(lambda i, y, t: dist.logpdf(t - y), dim, mode=mode)


def w_vector(family: CondLogDensityFamily, y, t, slot=2) -> np.ndarray:
    """Witness vector(s) of length ``2D`` at probe(s) ``t`` (last axis ``D``)."""
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    if y.shape[-1] != family.dim or t.shape[-1] != family.dim:
        raise ValueError(f"y and t need last dimension {family.dim}")
    with np.errstate(divide="ignore", invalid="ignore"):  # reported below instead
        d1, d2 = family.derivatives(y, t, slot)
    w = np.concatenate([d2, d1], axis=-1)
    if not np.all(np.isfinite(w)):
        raise ValueError(f"non-finite derivative at y={y.tolist()}")
    return w


def numerical_rank(mat, n_rows=None, fd=False):
    """Rank with threshold ``max(2D, K) * sigma_max * 1e-10`` (looser with finite differences)."""
    sv = np.linalg.svd(mat, compute_uv=False)
    if sv.size == 0 or sv[0] == 0:
        return 0, sv, 0.0
    k = mat.shape[0] if n_rows is None else n_rows
    tau = max(mat.shape[1], k) * sv[0] * 1e-10
    if fd:
        tau = max(tau, sv[0] * 1e-6)
    return int(np.sum(sv > tau)), sv, tau


@dataclass(frozen=True)
class SdvReport:
    y: np.ndarray
    probes: np.ndarray  # selected witness probes t_1..t_K
    witness: np.ndarray  # rows w(y, t_j) for the selected probes
    rank: int  # rank of the selected witness set
    max_rank: int  # rank over all probes examined
    verdict: bool
    threshold: float
    budget: int
    slot: int
    caveats: tuple = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "verdict": bool(self.verdict),
            "rank": int(self.rank),
            "max_rank": int(self.max_rank),
            "required_rank": int(self.witness.shape[1]),
            "budget": int(self.budget),
            "slot": int(self.slot),
            "threshold": float(self.threshold),
            "y": np.asarray(self.y, dtype=float).tolist(),
            "probes": np.asarray(self.probes, dtype=float).tolist(),
            "witness": np.asarray(self.witness, dtype=float).tolist(),
            "caveats": list(self.caveats),
        }

    def to_text(self) -> str:
        """JSON report, one matrix row per line."""
        d = self.to_dict()
        rows = {k: d.pop(k) for k in ("probes", "witness")}
        text = json.dumps(d, indent=2)[:-2]
        for k, m in rows.items():
            body = ",\n    ".join(json.dumps(r) for r in m)
            text += f',\n  "{k}": [\n    {body}\n  ]'
        return text + "\n}"


def probe_points(dim, budget, seed=0):
    """Scrambled Halton points on ``[-3, 3]^D``."""
    pts = qmc.Halton(d=dim, scramble=True, seed=np.random.default_rng(seed)).random(budget)
    return PROBE_BOX * (2.0 * pts - 1.0)


def check_sdv(family: CondLogDensityFamily, y, budget=256, seed=0, slot=2) -> SdvReport:
    """Search ``budget`` probes for ``2D`` linearly independent witness vectors.

    All probe witnesses form a ``budget x 2D`` matrix; column-pivoted QR of
    its transpose greedily picks the probe rows that add the most new
    direction, and the selected square block decides the verdict.
    """
    D = family.dim
    if budget < 2 * D:
        raise ValueError(f"budget must be at least 2D = {2 * D}")
    y = np.asarray(y, dtype=float).reshape(D)
    t = probe_points(D, budget, seed)
    W = w_vector(family, y[None, :], t, slot)
    fd = family.mode == "central-difference"
    max_rank, _, tau = numerical_rank(W, fd=fd)
    _, _, piv = qr(W.T, pivoting=True, mode="economic")
    chosen = np.sort(piv[: 2 * D])
    Wsel = W[chosen]
    rank, _, tau_sel = numerical_rank(Wsel, fd=fd)
    caveats = []
    if D == 1:
        caveats.append("D=1: any invertible scalar map is already a component-wise gauge, so the check is vacuous")
    caveats.extend(family.caveats)
    return SdvReport(y, t[chosen], Wsel, rank, max_rank, rank == 2 * D, tau, budget, slot, tuple(caveats))
