"""Contrastive training of structurally constrained pair classifiers.

A classifier separates matched view pairs ``(x1, x2)`` (label 1) from pairs
whose second element comes from a different row (label 0).  At the optimum
its logit ``r(x1, x2)`` is the log density ratio
``log p(x1, x2) - log p(x1) p(x2)``.  Constraining ``r`` to a sum of
per-component heads forces the feature extractors ``h`` to demix the views:

* ``FORM_A``: ``r = sum_i psi_i(h_i(x1), x2)``
* ``FORM_B``: ``r = sum_i psi_i(x1, h_i(x2))``
* ``FORM_C``: ``r = sum_i psi_i(h1_i(x1), h2_i(x2))``
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .nnet import Adam, Mlp
from .nnet import autodiff as ad
from .nnet import serialize

FORMS = ("FORM_A", "FORM_B", "FORM_C")
EXTRACTORS = ("mlp", "flow", "affine-flow")
COUPLINGS = ("additive", "affine")

DEGENERATE_WARNING = (
    "log-ratio ill-defined: the views look deterministically related, so the "
    "joint and the product of marginals are mutually singular and the optimal "
    "logit is everywhere either 0 or infinite; learned features are not meaningful"
)


LR_DECAYS = ("none", "cosine")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch: int = 256
    steps: int = 20_000
    seed: int = 0
    holdout: float = 0.1
    degenerate_patience: int = 500
    lr_decay: str = "none"  # "none" or "cosine" (to zero over ``steps``)

    def __post_init__(self):
        if self.lr_decay not in LR_DECAYS:
            raise ValueError(f"lr_decay must be one of {LR_DECAYS}, got {self.lr_decay!r}")


# ---------------------------------------------------------------------------
# pairs


@dataclass(frozen=True)
class ContrastiveBatch:
    x1: np.ndarray
    x2: np.ndarray
    labels: np.ndarray
    rows: np.ndarray
    partners: np.ndarray

    @property
    def shuffle(self) -> np.ndarray:
        """Row whose second view was paired with each anchor in the negatives."""
        return self.partners


def random_derangement(rng: np.random.Generator, m: int) -> np.ndarray:
    """Uniform permutation of ``range(m)`` with no fixed points (rejection)."""
    if m < 2:
        raise ValueError("no derangement of fewer than two elements")
    ar = np.arange(m)
    while True:
        p = rng.permutation(m)
        if not np.any(p == ar):
            return p


def _pair_indices(rng, pool, m):
    """Anchor rows plus, for each, a distinct partner row from the sample.

    Returns ``(batch_rows, neg_pos)``: negatives pair anchor ``j`` (position j
    of ``batch_rows``) with ``batch_rows[neg_pos[j]]``.  For ``m == 1`` one
    extra row is drawn so a distinct partner exists.
    """
    if m >= 2:
        rows = rng.choice(pool, size=m, replace=False)
        return rows, random_derangement(rng, m)
    rows = rng.choice(pool, size=2, replace=False)
    return rows, np.array([1])


def make_contrastive_batch(x_a, x_b, m, seed=0) -> ContrastiveBatch:
    x_a = np.asarray(x_a, dtype=float)
    x_b = np.asarray(x_b, dtype=float)
    n = x_a.shape[0]
    if x_b.shape[0] != n:
        raise ValueError("views must have equal row counts")
    if n < 2:
        raise ValueError("need at least two rows to form negative pairs")
    if not 1 <= m <= n:
        raise ValueError(f"batch size {m} must be in [1, {n}]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rows, neg = _pair_indices(rng, np.arange(n), m)
    anchors = rows[:m]
    partners = rows[neg]
    x1 = np.concatenate([x_a[anchors], x_a[anchors]])
    x2 = np.concatenate([x_b[anchors], x_b[partners]])
    labels = np.concatenate([np.ones(m), np.zeros(m)])
    return ContrastiveBatch(x1, x2, labels, anchors, partners)


# ---------------------------------------------------------------------------
# loss


def logistic_loss(r, labels) -> float:
    """Mean binary cross-entropy of ``sigmoid(r)`` against 0/1 labels."""
    r = np.asarray(r, dtype=float).ravel()
    labels = np.asarray(labels, dtype=float).ravel()
    if r.shape != labels.shape:
        raise ValueError("r and labels must have the same length")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    if not np.all(np.isfinite(r)):
        raise ValueError("non-finite logit")
    # -log sigmoid(r) = softplus(-r);  -log(1 - sigmoid(r)) = softplus(r)
    return float(np.mean(np.logaddexp(0.0, np.where(labels == 1, -r, r))))


def _loss_graph(r, labels):
    sign = np.where(labels == 1, -1.0, 1.0).reshape(r.shape)
    return ad.mean(ad.softplus(ad.mul(r, sign)))


# ---------------------------------------------------------------------------
# feature extractors


class CouplingFlow:
    """Invertible extractor: alternating coupling layers.

    Layer ``k`` updates one half of the coordinates using an MLP of the other
    half: a shift (``additive``) or a bounded log-scale plus shift
    (``affine``).  Conditioner nets start at zero so the flow starts as the
    identity.
    """

    def __init__(self, dim, hidden=(64, 64), n_layers=4, activation="smooth-sigmoid-like", seed=0,
                 coupling="additive"):
        if dim < 2:
            raise ValueError("coupling flows need at least two dimensions")
        if coupling not in COUPLINGS:
            raise ValueError(f"unknown coupling {coupling!r}; choose from {COUPLINGS}")
        self.dim, self.coupling = dim, coupling
        self.split = dim // 2
        seeds = np.random.SeedSequence(seed).generate_state(n_layers)
        width = 2 if coupling == "affine" else 1
        self.nets = []
        for k in range(n_layers):
            a, b = self._halves(k)
            self.nets.append(Mlp((len(a), *hidden, width * len(b)), activation, int(seeds[k]), zero_last=True))
        self.n_params = sum(n.n_params for n in self.nets)
        self.theta = np.concatenate([n.theta for n in self.nets])
        self.grad = np.zeros(self.n_params)
        self.bind(self.theta, self.grad)
        self.hidden, self.n_layers, self.activation, self.seed = tuple(hidden), n_layers, activation, seed

    def _halves(self, k):
        lo, hi = np.arange(self.split), np.arange(self.split, self.dim)
        return (lo, hi) if k % 2 == 0 else (hi, lo)

    def bind(self, theta, grad):
        theta[:] = self.theta
        self.theta, self.grad = theta, grad
        off = 0
        for n in self.nets:
            n.bind(theta[off:off + n.n_params], grad[off:off + n.n_params])
            off += n.n_params

    def _update(self, k, xa, xb):
        out = self.nets[k].graph(xa)
        nb = len(self._halves(k)[1])
        if self.coupling == "additive":
            return ad.add(xb, out)
        log_scale = ad.mul(ad.tanh(ad.mul(ad.take_cols(out, np.arange(nb)), 0.5)), 2.0)
        shift = ad.take_cols(out, np.arange(nb, 2 * nb))
        return ad.add(ad.mul(xb, ad.exp(log_scale)), shift)

    def graph(self, x):
        x = ad.as_tensor(x)
        for k in range(len(self.nets)):
            a, b = self._halves(k)
            xa = ad.take_cols(x, a)
            xb = self._update(k, xa, ad.take_cols(x, b))
            cols = [None] * self.dim
            parts = [ad.take_cols(xa, j) for j in range(len(a))] + [ad.take_cols(xb, j) for j in range(len(b))]
            for idx, part in zip(list(a) + list(b), parts):
                cols[idx] = part
            x = ad.concat_cols(cols)
        return x

    def __call__(self, x):
        return self.graph(np.asarray(x, dtype=float)).value

    def inverse(self, y):
        y = np.array(y, dtype=float, copy=True)
        for k in reversed(range(len(self.nets))):
            a, b = self._halves(k)
            out = self.nets[k].graph(y[:, a]).value
            if self.coupling == "additive":
                y[:, b] = y[:, b] - out
            else:
                nb = len(b)
                log_scale = 2.0 * np.tanh(0.5 * out[:, :nb])
                y[:, b] = (y[:, b] - out[:, nb:]) * np.exp(-log_scale)
        return y

    def header(self):
        return {"kind": "flow", "dim": self.dim, "hidden": list(self.hidden), "n_layers": self.n_layers,
                "activation": self.activation, "seed": self.seed, "coupling": self.coupling}


def _spawn_seeds(seed, n):
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


class RegressionModel:
    """Feature extractor(s) plus ``D`` scalar heads composing the logit ``r``.

    All parameters share one flat vector ``theta`` so a single optimizer
    state covers the whole model.  Heads' output layers start at zero, so an
    untrained model has ``r == 0`` and loss ``ln 2``.
    """

    def __init__(self, form, dim, h_widths=(128, 128), psi_widths=(64, 64),
                 activation="smooth-sigmoid-like", seed=0, extractor="mlp", embed_widths=()):
        if form not in FORMS:
            raise ValueError(f"unknown regression form {form!r}; choose from {FORMS}")
        if extractor not in EXTRACTORS:
            raise ValueError(f"unknown extractor {extractor!r}; choose from {EXTRACTORS}")
        self.form, self.dim = form, int(dim)
        self.h_widths, self.psi_widths = tuple(h_widths), tuple(psi_widths)
        self.activation, self.seed, self.extractor = activation, seed, extractor
        self.embed_widths = tuple(embed_widths)
        if self.embed_widths and form == "FORM_C":
            raise ValueError("embed_widths applies to FORM_A/FORM_B (the full opposite view)")
        seeds = iter(_spawn_seeds(seed, 3 + self.dim))
        sides = ("h1", "h2") if form == "FORM_C" else (("h1",) if form == "FORM_A" else ("h2",))
        self.extractors = {}
        for side in ("h1", "h2"):
            s = next(seeds)
            if side in sides:
                self.extractors[side] = self._make_extractor(s)
        # optional trunk shared by all heads that embeds the full opposite view
        self.embed = None
        s = next(seeds)
        if self.embed_widths:
            self.embed = Mlp((self.dim, *self.embed_widths), activation, s)
        ctx = self.embed_widths[-1] if self.embed_widths else self.dim
        head_in = 2 if form == "FORM_C" else 1 + ctx
        self.heads = [Mlp((head_in, *self.psi_widths, 1), activation, next(seeds), zero_last=True)
                      for _ in range(self.dim)]
        nets = list(self.extractors.values()) + ([self.embed] if self.embed else []) + self.heads
        self.n_params = sum(n.n_params for n in nets)
        theta = np.concatenate([n.theta for n in nets])
        self.theta, self.grad = theta, np.zeros_like(theta)
        off = 0
        for n in nets:
            n.bind(self.theta[off:off + n.n_params], self.grad[off:off + n.n_params])
            off += n.n_params

    def _make_extractor(self, seed):
        if self.extractor in ("flow", "affine-flow"):
            coupling = "affine" if self.extractor == "affine-flow" else "additive"
            return CouplingFlow(self.dim, self.h_widths, activation=self.activation, seed=seed, coupling=coupling)
        return Mlp((self.dim, *self.h_widths, self.dim), self.activation, seed)

    # -- graphs -----------------------------------------------------------

    def _side(self, name, x):
        net = self.extractors.get(name)
        if net is None:
            return ad.as_tensor(x) if self.embed is None else self.embed.graph(x)
        return net.graph(x)

    def logit_graph(self, x1, x2, left, right):
        """Logits for pairs ``(x1[left[k]], x2[right[k]])`` as an (n, 1) Tensor."""
        f1 = ad.gather_rows(self._side("h1", x1), left)
        f2 = ad.gather_rows(self._side("h2", x2), right)
        r = None
        for i, head in enumerate(self.heads):
            if self.form == "FORM_A":
                inp = ad.concat_cols([ad.take_cols(f1, i), f2])
            elif self.form == "FORM_B":
                inp = ad.concat_cols([f1, ad.take_cols(f2, i)])
            else:
                inp = ad.concat_cols([ad.take_cols(f1, i), ad.take_cols(f2, i)])
            out = head.graph(inp)
            r = out if r is None else ad.add(r, out)
        return r

    def logits(self, x1, x2):
        """Row-wise logits ``r(x1[j], x2[j])``."""
        x1, x2 = np.asarray(x1, float), np.asarray(x2, float)
        idx = np.arange(x1.shape[0])
        return self.logit_graph(x1, x2, idx, idx).value.ravel()

    def features(self, x, which_view):
        name = {1: "h1", 2: "h2"}.get(which_view)
        if name is None:
            raise ValueError("which_view must be 1 or 2")
        net = self.extractors.get(name)
        if net is None:
            raise ValueError(f"{self.form} has no feature extractor on view {which_view}")
        return net.graph(np.asarray(x, dtype=float)).value

    # -- snapshots --------------------------------------------------------

    def header(self):
        return {
            "kind": "regression-model",
            "form": self.form,
            "dim": self.dim,
            "h_widths": list(self.h_widths),
            "psi_widths": list(self.psi_widths),
            "activation": self.activation,
            "seed": self.seed,
            "extractor": self.extractor,
            "embed_widths": list(self.embed_widths),
        }

    def save(self, path):
        serialize.save(path, self.theta, self.header())

    @classmethod
    def load(cls, path):
        header, theta = serialize.load(path)
        model = cls(header["form"], header["dim"], header["h_widths"], header["psi_widths"],
                    header["activation"], header["seed"], header["extractor"], header.get("embed_widths", ()))
        if theta.size != model.n_params:
            raise ValueError(f"snapshot has {theta.size} parameters, model needs {model.n_params}")
        model.theta[:] = theta
        return model


def extract_features(model: RegressionModel, x, which_view) -> np.ndarray:
    return model.features(x, which_view)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: object
    steps: np.ndarray
    loss: np.ndarray
    acc: np.ndarray
    train_rows: np.ndarray
    test_rows: np.ndarray
    heldout_loss: float
    warnings: list = field(default_factory=list)

    @property
    def final_loss(self):
        return float(self.loss[-1])

    def trace_rows(self):
        return zip(self.steps.tolist(), self.loss.tolist(), self.acc.tolist())


def split_rows(n, holdout, seed):
    """Seeded train/held-out split of ``range(n)``."""
    if not 0 <= holdout < 1:
        raise ValueError("holdout fraction must be in [0, 1)")
    perm = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,))).permutation(n)
    n_test = int(round(holdout * n))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def _views_of(data, pair):
    views = data.observations() if hasattr(data, "observations") else tuple(data)
    if len(views) < 2:
        raise ValueError("training needs at least two views")
    return np.asarray(views[pair[0]], float), np.asarray(views[pair[1]], float)


def scheduled_lr(config: TrainConfig, t: int) -> float:
    """Learning rate for 0-based step ``t``."""
    if config.lr_decay == "cosine":
        return 0.5 * config.lr * (1.0 + math.cos(math.pi * t / config.steps))
    return config.lr


def deterministic_pair(data, pair=(0, 1)) -> bool:
    """True when the dataset's spec makes both views noiseless functions of the sources."""
    spec = getattr(data, "spec", None)
    if spec is None:
        return False
    cors = [spec.views[i].corrupter for i in pair]
    return all(c.kind == "identity" or c.noise_scale == 0 for c in cors)


def train(model: RegressionModel, data, config: TrainConfig = TrainConfig(), pair=(0, 1),
          callback=None) -> TrainResult:
    """Fit ``model`` by minimizing the logistic loss on matched vs shuffled pairs.

    ``data`` is a :class:`~mvica.synthgen.PairedDataset` (its spec is only
    consulted for the degeneracy check) or a sequence of view matrices;
    ``pair`` picks the two views.  The degeneracy warning is attached when
    its generative description makes both views noiseless, or when training separates pairs
    near perfectly for ``degenerate_patience`` steps in a row (training then
    stops).
    """
    x1, x2 = _views_of(data, pair)
    if x1.shape != x2.shape or x1.shape[1] != model.dim:
        raise ValueError(f"views of shape {x1.shape}/{x2.shape} incompatible with model dim {model.dim}")
    n = x1.shape[0]
    train_rows, test_rows = split_rows(n, config.holdout, config.seed)
    if train_rows.size < 2:
        raise ValueError("need at least two training rows")
    m = min(config.batch, train_rows.size)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(11,)))
    opt = Adam(model.n_params, lr=config.lr)
    labels = np.concatenate([np.ones(m), np.zeros(m)])
    steps = np.arange(1, config.steps + 1)
    losses = np.empty(config.steps)
    accs = np.empty(config.steps)
    warnings, streak, done = [], 0, config.steps
    if deterministic_pair(data, pair):
        warnings.append(DEGENERATE_WARNING)
    for t in range(config.steps):
        opt.lr = scheduled_lr(config, t)
        rows, neg = _pair_indices(rng, train_rows, m)
        left = np.concatenate([np.arange(m), np.arange(m)])
        right = np.concatenate([np.arange(m), neg])
        r = model.logit_graph(x1[rows], x2[rows], left, right)
        loss = _loss_graph(r, labels)
        model.grad[:] = 0.0
        loss.backward()
        opt.step(model.theta, model.grad)
        losses[t] = float(loss.value)
        accs[t] = float(np.mean((r.value.ravel() > 0) == (labels == 1)))
        if callback is not None:
            callback(t + 1, losses[t], accs[t])
        streak = streak + 1 if (accs[t] > 0.999 and losses[t] < 0.01) else 0
        if streak >= config.degenerate_patience:
            if DEGENERATE_WARNING not in warnings:
                warnings.append(DEGENERATE_WARNING)
            done = t + 1
            break
    heldout = float("nan")
    if test_rows.size >= 2:
        hrng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(13,)))
        k = test_rows.size
        neg = random_derangement(hrng, k)
        idx = np.arange(k)
        r = model.logit_graph(x1[test_rows], x2[test_rows], np.concatenate([idx, idx]),
                              np.concatenate([idx, neg])).value.ravel()
        heldout = logistic_loss(r, np.concatenate([np.ones(k), np.zeros(k)]))
    return TrainResult(model, steps[:done], losses[:done], accs[:done], train_rows, test_rows, heldout, warnings)


def moving_average(x, window=200):
    x = np.asarray(x, dtype=float)
    if x.size < window:
        return np.array([x.mean()]) if x.size else x
    c = np.cumsum(np.insert(x, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def loss_trend_ok(loss, window=200, tol=0.01) -> bool:
    """Moving average of the loss never rises more than ``tol`` above its running minimum."""
    ma = moving_average(loss, window)
    return bool(np.all(ma - np.minimum.accumulate(ma) <= tol))


# ---------------------------------------------------------------------------
# direct density-ratio estimation


def train_ratio(samples_1, samples_0, widths=(32, 32), activation="smooth-sigmoid-like",
                config: TrainConfig = TrainConfig(steps=3000, lr=1e-2, batch=512)):
    """Fit ``r(x) ~ log p1(x)/p0(x)`` by logistic regression of label-1 vs label-0 samples."""
    a = np.asarray(samples_1, float)
    b = np.asarray(samples_0, float)
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    net = Mlp((a.shape[1], *widths, 1), activation, config.seed, zero_last=True)
    opt = Adam(net.n_params, lr=config.lr)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(17,)))
    m = min(config.batch, len(a), len(b))
    labels = np.concatenate([np.ones(m), np.zeros(m)])
    losses = np.empty(config.steps)
    for t in range(config.steps):
        opt.lr = scheduled_lr(config, t)
        xb = np.concatenate([a[rng.choice(len(a), m, replace=False)], b[rng.choice(len(b), m, replace=False)]])
        r = net.graph(xb)
        loss = _loss_graph(r, labels)
        net.grad[:] = 0.0
        loss.backward()
        opt.step(net.theta, net.grad)
        losses[t] = float(loss.value)
    return net, losses
