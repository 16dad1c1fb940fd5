"""Synthetic multi-view data: independent sources, component-wise corrupters,
invertible mixings.

Each view is ``x_i = f_i(g_i(s, n_i))``.  Ground truth (sources and
corruptions) is kept on the dataset for scoring only; training code should
go through :meth:`PairedDataset.observations`.

All randomness is drawn as uniforms through inverse CDFs from streams keyed
by ``(master seed, purpose, view, component)``, so row ``j`` of a dataset
depends only on those keys and ``j``: sampling ``n`` rows gives the first
``n`` rows of any larger sample.
"""
from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import ndtri

from . import tables

EPS_DET = 1e-3
MAX_MIXING_RETRIES = 100
BISECTION_TOL = 1e-12
H_FD = 1e-5

SOURCE_KINDS = ("uniform", "laplace", "gaussian")
NOISE_KINDS = ("gaussian", "laplace", "uniform", "logistic")
CORRUPTER_KINDS = ("identity", "additive", "scaled-additive")
NONLINEARITIES = ("leaky-affine", "smooth-monotone")

_STREAM_SOURCE = 0
_STREAM_NOISE = 1
_STREAM_MIXING = 2


class ConstructionError(ValueError):
    """A generative model could not be built as requested."""


def _stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def _open_uniforms(rng: np.random.Generator, n: int) -> np.ndarray:
    # strictly inside (0, 1) so every inverse CDF stays finite
    k = rng.integers(0, 2**53, size=n, dtype=np.int64)
    return (k.astype(np.float64) + 0.5) / 2.0**53


# ---------------------------------------------------------------------------
# distributions


@dataclass(frozen=True)
class Distribution:
    kind: str
    params: tuple[float, ...]

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS + ("logistic",):
            raise ValueError(f"unknown distribution {self.kind!r}")
        if len(self.params) != 2:
            raise ValueError(f"{self.kind} takes two parameters, got {self.params}")
        a, b = self.params
        if self.kind == "uniform" and not b > a:
            raise ValueError(f"uniform({a}, {b}) needs b > a")
        if self.kind != "uniform" and not b > 0:
            raise ValueError(f"{self.kind} scale must be positive, got {b}")

    def ppf(self, u: np.ndarray) -> np.ndarray:
        a, b = self.params
        if self.kind == "uniform":
            return a + (b - a) * u
        if self.kind == "gaussian":
            return a + b * ndtri(u)
        if self.kind == "laplace":
            c = u - 0.5
            return a - b * np.sign(c) * np.log1p(-2.0 * np.abs(c))
        return a + b * np.log(u / (1.0 - u))  # logistic

    @property
    def mean(self) -> float:
        a, b = self.params
        return 0.5 * (a + b) if self.kind == "uniform" else a

    @property
    def variance(self) -> float:
        a, b = self.params
        if self.kind == "uniform":
            return (b - a) ** 2 / 12.0
        if self.kind == "gaussian":
            return b * b
        if self.kind == "laplace":
            return 2.0 * b * b
        return (math.pi * b) ** 2 / 3.0

    def __str__(self) -> str:
        return f"{self.kind}({self.params[0]!r}, {self.params[1]!r})"


_DIST_RE = re.compile(r"^\s*([a-z]+)\s*\(\s*([^,]+)\s*,\s*([^)]+)\)\s*$")


def parse_distribution(text: str) -> Distribution:
    """Parse ``"laplace(0, 1)"`` style tags."""
    m = _DIST_RE.match(text)
    if not m:
        raise ValueError(f"cannot parse distribution {text!r}; expected kind(p1, p2)")
    return Distribution(m.group(1), (float(m.group(2)), float(m.group(3))))


def unit_noise(kind: str) -> Distribution:
    """Zero-mean, unit-variance member of a noise family."""
    if kind == "gaussian":
        return Distribution("gaussian", (0.0, 1.0))
    if kind == "laplace":
        return Distribution("laplace", (0.0, 1.0 / math.sqrt(2.0)))
    if kind == "uniform":
        r = math.sqrt(3.0)
        return Distribution("uniform", (-r, r))
    if kind == "logistic":
        return Distribution("logistic", (0.0, math.sqrt(3.0) / math.pi))
    raise ValueError(f"unknown noise kind {kind!r}; choose from {NOISE_KINDS}")


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class SourceSpec:
    dim: int
    dists: tuple[Distribution, ...]

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("source dimension must be >= 1")
        if len(self.dists) != self.dim:
            raise ValueError(f"need {self.dim} component distributions, got {len(self.dists)}")

    @classmethod
    def iid(cls, dim: int, dist: Distribution | str) -> "SourceSpec":
        if isinstance(dist, str):
            dist = parse_distribution(dist)
        return cls(dim, (dist,) * dim)

    @property
    def variance(self) -> np.ndarray:
        return np.array([d.variance for d in self.dists])


@dataclass(frozen=True)
class CorrupterSpec:
    """Component-wise corrupter ``g(s, n)`` with ``n = noise_scale * unit noise``.

    ``identity``: g = s.  ``additive``: g = s + n.
    ``scaled-additive``: g = s + sqrt(1 + s^2) * n (heteroscedastic).
    """

    kind: str = "additive"
    noise: str = "logistic"
    noise_scale: float = 0.0
    zero_mean: bool = True

    def __post_init__(self):
        if self.kind not in CORRUPTER_KINDS:
            raise ValueError(f"unknown corrupter kind {self.kind!r}; choose from {CORRUPTER_KINDS}")
        if self.noise not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.noise!r}; choose from {NOISE_KINDS}")
        if not self.noise_scale >= 0:
            raise ValueError(f"noise_scale must be >= 0, got {self.noise_scale}")

    def unit_noise(self, u: np.ndarray) -> np.ndarray:
        n = unit_noise(self.noise).ppf(u)
        return n if self.zero_mean else n + 1.0

    def __call__(self, s: np.ndarray, n: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return np.array(s, dtype=float, copy=True)
        if self.kind == "additive":
            return s + n
        return s + np.sqrt(1.0 + s * s) * n

    @property
    def deterministic(self) -> bool:
        return self.kind == "identity" or self.noise_scale == 0.0

    @property
    def noise_variance(self) -> float:
        return 0.0 if self.kind == "identity" else self.noise_scale**2


def _leaky(x, slope):
    return np.where(x >= 0, x, slope * x)


def _leaky_inv(y, slope):
    return np.where(y >= 0, y, y / slope)


def _smooth(x):
    return 0.5 * (x + np.tanh(x))


def _smooth_inv(y):
    # 0.5*(x + tanh x) = y has its root inside [2y - 1, 2y + 1]
    target = 2.0 * np.asarray(y, dtype=float)
    lo, hi = target - 1.0, target + 1.0
    tol = BISECTION_TOL * np.maximum(1.0, np.abs(target))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        above = mid + np.tanh(mid) > target
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
        if np.all(hi - lo <= tol):
            break
    return 0.5 * (lo + hi)


@dataclass(frozen=True, eq=False)
class MixingSpec:
    """Invertible mixing: ``L`` layers of ``x -> sigma(W x)``.

    Weights are drawn from ``seed`` (standard normal, rows normalized to unit
    length, redrawn until ``|det W| > EPS_DET``) unless given explicitly.
    """

    dim: int
    layers: int = 2
    nonlinearity: str = "leaky-affine"
    slope: float = 0.2
    seed: int = 0
    weights: tuple[np.ndarray, ...] | None = None

    def __post_init__(self):
        if self.layers < 0:
            raise ValueError("layer count must be >= 0")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}; choose from {NONLINEARITIES}")
        if not self.slope > 0:
            raise ValueError("leaky slope must be positive for invertibility")
        if self.weights is None:
            object.__setattr__(self, "weights", self._draw_weights())
        else:
            ws = tuple(np.array(w, dtype=float) for w in self.weights)
            if len(ws) != self.layers:
                raise ValueError(f"got {len(ws)} weight matrices for {self.layers} layers")
            for k, w in enumerate(ws):
                if w.shape != (self.dim, self.dim):
                    raise ValueError(f"layer {k} weight has shape {w.shape}, need {(self.dim, self.dim)}")
                if abs(np.linalg.det(w)) <= EPS_DET * np.prod(np.linalg.norm(w, axis=1)):
                    raise ConstructionError(f"layer {k} weight is (near) singular")
            object.__setattr__(self, "weights", ws)
        for w in self.weights:
            w.setflags(write=False)

    def _draw_weights(self) -> tuple[np.ndarray, ...]:
        rng = _stream(self.seed, _STREAM_MIXING)
        out = []
        for k in range(self.layers):
            for _ in range(MAX_MIXING_RETRIES):
                w = rng.standard_normal((self.dim, self.dim))
                w /= np.linalg.norm(w, axis=1, keepdims=True)
                if abs(np.linalg.det(w)) > EPS_DET:
                    break
            else:
                raise ConstructionError(
                    f"layer {k}: no weight matrix with |det| > {EPS_DET} after {MAX_MIXING_RETRIES} draws"
                )
            out.append(w)
        return tuple(out)

    def _act(self, x):
        return _leaky(x, self.slope) if self.nonlinearity == "leaky-affine" else _smooth(x)

    def _act_inv(self, y):
        return _leaky_inv(y, self.slope) if self.nonlinearity == "leaky-affine" else _smooth_inv(y)

    def apply(self, z: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(z, dtype=float))
        for w in self.weights:
            x = self._act(x @ w.T)
        return x

    def invert(self, x: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(x, dtype=float))
        for w in reversed(self.weights):
            z = np.linalg.solve(w, self._act_inv(z).T).T
        return z


def apply_mixing(spec: MixingSpec, z: np.ndarray) -> np.ndarray:
    return spec.apply(z)


def invert_mixing(spec: MixingSpec, x: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`apply_mixing` (oracle for tests)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != spec.dim:
        raise ValueError(f"expected {spec.dim} columns, got {x.shape[1]}")
    try:
        return spec.invert(x)
    except np.linalg.LinAlgError as exc:
        raise ConstructionError(f"singular layer matrix: {exc}") from exc


@dataclass(frozen=True)
class ViewSpec:
    corrupter: CorrupterSpec
    mixing: MixingSpec


@dataclass(frozen=True)
class GenerativeSpec:
    source: SourceSpec
    views: tuple[ViewSpec, ...]
    seed: int = 0

    def __post_init__(self):
        if len(self.views) < 2:
            raise ValueError("need at least two views")
        for i, v in enumerate(self.views):
            if v.mixing.dim != self.source.dim:
                raise ValueError(f"view {i} mixing dim {v.mixing.dim} != source dim {self.source.dim}")

    @property
    def dim(self) -> int:
        return self.source.dim

    @property
    def n_views(self) -> int:
        return len(self.views)

    def with_noise_scale(self, view: int, scale: float) -> "GenerativeSpec":
        views = list(self.views)
        views[view] = replace(views[view], corrupter=replace(views[view].corrupter, noise_scale=scale))
        return replace(self, views=tuple(views))


def build_spec(
    dim: int,
    n_views: int = 2,
    source: str | Distribution = "uniform(-1.7320508075688772, 1.7320508075688772)",
    corrupters: CorrupterSpec | Sequence[CorrupterSpec] = CorrupterSpec(),
    mixing_layers: int = 2,
    nonlinearity: str = "leaky-affine",
    slope: float = 0.2,
    seed: int = 0,
) -> GenerativeSpec:
    """Convenience constructor; mixing seeds are derived from ``seed`` per view."""
    if isinstance(corrupters, CorrupterSpec):
        corrupters = [corrupters] * n_views
    if len(corrupters) != n_views:
        raise ValueError(f"need {n_views} corrupters, got {len(corrupters)}")
    views = []
    for i, c in enumerate(corrupters):
        mseed = int(np.random.SeedSequence(seed, spawn_key=(_STREAM_MIXING, i)).generate_state(1)[0])
        views.append(ViewSpec(c, MixingSpec(dim, mixing_layers, nonlinearity, slope, mseed)))
    return GenerativeSpec(SourceSpec.iid(dim, source), tuple(views), seed)


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True, eq=False)
class PairedDataset:
    views: tuple[np.ndarray, ...]
    sources: np.ndarray
    corruptions: tuple[np.ndarray, ...]
    spec: GenerativeSpec | None
    seed: int

    def __post_init__(self):
        n = self.sources.shape[0]
        for m in (*self.views, *self.corruptions):
            if m.shape[0] != n:
                raise ValueError("all matrices must share n_samples")

    @property
    def n_samples(self) -> int:
        return self.sources.shape[0]

    @property
    def dim(self) -> int:
        return self.sources.shape[1]

    def observations(self) -> tuple[np.ndarray, ...]:
        """Views only; what a learner is allowed to see."""
        return self.views

    def subset(self, rows) -> "PairedDataset":
        return PairedDataset(
            tuple(v[rows] for v in self.views),
            self.sources[rows],
            tuple(z[rows] for z in self.corruptions),
            self.spec,
            self.seed,
        )


def sample_sources(spec: SourceSpec, n: int, seed: int) -> np.ndarray:
    cols = [d.ppf(_open_uniforms(_stream(seed, _STREAM_SOURCE, j), n)) for j, d in enumerate(spec.dists)]
    return np.column_stack(cols)


def sample_unit_noise(corrupter: CorrupterSpec, dim: int, n: int, seed: int, view: int) -> np.ndarray:
    cols = [corrupter.unit_noise(_open_uniforms(_stream(seed, _STREAM_NOISE, view, j), n)) for j in range(dim)]
    return np.column_stack(cols)


def sample_dataset(spec: GenerativeSpec, n_samples: int) -> PairedDataset:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    d = spec.dim
    s = sample_sources(spec.source, n_samples, spec.seed)
    xs, zs = [], []
    for i, view in enumerate(spec.views):
        c = view.corrupter
        n = c.noise_scale * sample_unit_noise(c, d, n_samples, spec.seed, i)
        z = c(s, n)
        zs.append(z)
        xs.append(view.mixing.apply(z))
    return PairedDataset(tuple(xs), s, tuple(zs), spec, spec.seed)


# ---------------------------------------------------------------------------
# corrupter regularity


@dataclass(frozen=True)
class CorrupterCheck:
    bound_a: np.ndarray
    bound_b: np.ndarray
    min_ds: np.ndarray
    passes: bool


def check_corrupter_conditions(
    corrupter: CorrupterSpec | Callable[[np.ndarray, np.ndarray], np.ndarray],
    s_grid,
    h_fd: float = H_FD,
) -> CorrupterCheck:
    """Bounds on dg/dn and dg/ds at n = 0 over a grid of source vectors.

    Passes when dg/dn is bounded and 0 < dg/ds <= bound_b on every grid
    point, component-wise.
    """
    grid = np.atleast_2d(np.asarray(s_grid, dtype=float))
    if grid.size == 0:
        raise ValueError("source grid is empty")
    g = corrupter
    zero = np.zeros_like(grid)
    hs = h_fd * np.maximum(1.0, np.abs(grid))
    hn = np.full_like(grid, h_fd)
    dn = (np.asarray(g(grid, zero + hn), float) - np.asarray(g(grid, zero - hn), float)) / (2 * hn)
    ds = (np.asarray(g(grid + hs, zero), float) - np.asarray(g(grid - hs, zero), float)) / (2 * hs)
    for name, arr in (("dg/dn", dn), ("dg/ds", ds)):
        bad = ~np.isfinite(arr)
        if bad.any():
            row = int(np.argwhere(bad)[0][0])
            raise ValueError(f"non-finite {name} at grid point {grid[row].tolist()}")
    bound_a = np.abs(dn).max(axis=0)
    bound_b = ds.max(axis=0)
    min_ds = ds.min(axis=0)
    passes = bool(np.all(np.isfinite(bound_a)) and np.all(min_ds > 0))
    return CorrupterCheck(bound_a, bound_b, min_ds, passes)


# ---------------------------------------------------------------------------
# config and CSV


DATA_KEYS = (
    "dim", "views", "source_dist", "corrupter", "noise", "noise_scale", "zero_mean",
    "mixing_layers", "nonlinearity", "slope", "seed", "n_samples",
)


def _per_view(value: str, n_views: int, key: str) -> list[str]:
    parts = [p.strip() for p in value.split(",")] if "(" not in value else [value.strip()]
    if len(parts) == 1:
        return parts * n_views
    if len(parts) != n_views:
        raise ValueError(f"[data].{key}: {len(parts)} values for {n_views} views")
    return parts


def spec_from_config(section: Mapping[str, str]) -> GenerativeSpec:
    for key in section:
        if key not in DATA_KEYS:
            raise ValueError(f"unknown key [data].{key}")
    try:
        dim = int(section["dim"])
        n_views = int(section.get("views", "2"))
        seed = int(section["seed"])
    except KeyError as exc:
        raise ValueError(f"missing key [data].{exc.args[0]}") from None
    src_text = section.get("source_dist", "uniform(-1.7320508075688772, 1.7320508075688772)")
    dists = [parse_distribution(t) for t in src_text.split(";")]
    if len(dists) == 1:
        dists = dists * dim
    source = SourceSpec(dim, tuple(dists))
    kinds = _per_view(section.get("corrupter", "additive"), n_views, "corrupter")
    noises = _per_view(section.get("noise", "logistic"), n_views, "noise")
    scales = _per_view(section.get("noise_scale", "0.0"), n_views, "noise_scale")
    zero_mean = section.get("zero_mean", "true").strip().lower() in ("1", "true", "yes")
    layers = int(section.get("mixing_layers", "2"))
    nonlin = section.get("nonlinearity", "leaky-affine").strip()
    slope = float(section.get("slope", "0.2"))
    corrupters = [CorrupterSpec(k, nz, float(sc), zero_mean) for k, nz, sc in zip(kinds, noises, scales)]
    views = []
    for i, c in enumerate(corrupters):
        mseed = int(np.random.SeedSequence(seed, spawn_key=(_STREAM_MIXING, i)).generate_state(1)[0])
        views.append(ViewSpec(c, MixingSpec(dim, layers, nonlin, slope, mseed)))
    return GenerativeSpec(source, tuple(views), seed)


def spec_to_config(spec: GenerativeSpec) -> dict[str, str]:
    """Inverse of :func:`spec_from_config` for specs built from a config."""
    dists = {str(d) for d in spec.source.dists}
    src = str(spec.source.dists[0]) if len(dists) == 1 else "; ".join(str(d) for d in spec.source.dists)
    m0 = spec.views[0].mixing
    return {
        "dim": str(spec.dim),
        "views": str(spec.n_views),
        "source_dist": src,
        "corrupter": ", ".join(v.corrupter.kind for v in spec.views),
        "noise": ", ".join(v.corrupter.noise for v in spec.views),
        "noise_scale": ", ".join(repr(v.corrupter.noise_scale) for v in spec.views),
        "zero_mean": "true" if spec.views[0].corrupter.zero_mean else "false",
        "mixing_layers": str(m0.layers),
        "nonlinearity": m0.nonlinearity,
        "slope": repr(m0.slope),
        "seed": str(spec.seed),
    }


def write_dataset(ds: PairedDataset, directory) -> list[str]:
    paths = []
    for i, x in enumerate(ds.views, start=1):
        paths.append(tables.write_matrix(os.path.join(directory, f"view_{i}.csv"), x, ds.seed))
    paths.append(tables.write_matrix(os.path.join(directory, "sources.csv"), ds.sources, ds.seed))
    for i, z in enumerate(ds.corruptions, start=1):
        paths.append(tables.write_matrix(os.path.join(directory, f"corruptions_{i}.csv"), z, ds.seed))
    return paths


def read_dataset(directory, spec: GenerativeSpec | None = None) -> PairedDataset:
    views, zs = [], []
    i = 1
    while os.path.exists(os.path.join(directory, f"view_{i}.csv")):
        seed, x = tables.read_matrix(os.path.join(directory, f"view_{i}.csv"))
        views.append(x)
        zs.append(tables.read_matrix(os.path.join(directory, f"corruptions_{i}.csv"))[1])
        i += 1
    if not views:
        raise FileNotFoundError(f"no view_*.csv files in {directory}")
    s = tables.read_matrix(os.path.join(directory, "sources.csv"))[1]
    return PairedDataset(tuple(views), s, tuple(zs), spec, int(seed) if seed is not None else 0)
