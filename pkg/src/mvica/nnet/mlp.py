"""Fully connected networks whose parameters live in one flat vector."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad

ACTIVATION_TAGS = tuple(ad.ACTIVATIONS)


class Mlp:
    """``widths = (in, h1, ..., out)``; activation after every layer but the last.

    Weights use Glorot-uniform initialization and zero biases; with
    ``zero_last`` the output layer starts at zero so the network outputs 0.
    Parameters are stored in ``theta`` (layer by layer, weight then bias),
    which may be a view into a larger buffer owned by a composite model.
    """

    def __init__(self, widths, activation="smooth-sigmoid-like", seed=0, zero_last=False, slope=0.2):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"bad layer widths {widths}")
        if activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; choose from {ACTIVATION_TAGS}")
        self.widths = widths
        self.activation = activation
        self.slope = slope
        self.seed = seed
        self.zero_last = zero_last
        self._layout = []
        offset = 0
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            w = slice(offset, offset + fan_in * fan_out)
            offset += fan_in * fan_out
            b = slice(offset, offset + fan_out)
            offset += fan_out
            self._layout.append((w, (fan_in, fan_out), b))
        self.n_params = offset
        self.theta = np.zeros(offset)
        self.grad = np.zeros(offset)
        self._tape = None
        self.initialize()

    @property
    def in_dim(self):
        return self.widths[0]

    @property
    def out_dim(self):
        return self.widths[-1]

    def initialize(self):
        rng = np.random.default_rng(self.seed)
        last = len(self._layout) - 1
        for k, (w, (fan_in, fan_out), b) in enumerate(self._layout):
            if k == last and self.zero_last:
                self.theta[w] = 0.0
            else:
                bound = np.sqrt(6.0 / (fan_in + fan_out))
                self.theta[w] = rng.uniform(-bound, bound, size=fan_in * fan_out)
            self.theta[b] = 0.0

    def bind(self, theta, grad):
        """Move parameters into caller-owned buffers (views of equal length)."""
        if theta.shape != (self.n_params,) or grad.shape != (self.n_params,):
            raise ValueError("buffer length does not match parameter count")
        theta[:] = self.theta
        self.theta, self.grad = theta, grad

    def weights(self, k):
        w, shape, b = self._layout[k]
        return self.theta[w].reshape(shape), self.theta[b]

    def graph(self, x):
        """Build the forward graph on ``x`` (a Tensor or array)."""
        x = ad.as_tensor(x)
        if x.value.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input with {self.in_dim} columns, got shape {x.shape}")
        act = ad.ACTIVATIONS[self.activation]
        last = len(self._layout) - 1
        for k, (w, shape, b) in enumerate(self._layout):
            wt = ad.Tensor(self.theta[w].reshape(shape), grad=self.grad[w].reshape(shape), requires_grad=True)
            bt = ad.Tensor(self.theta[b], grad=self.grad[b], requires_grad=True)
            x = ad.add(ad.matmul(x, wt), bt)
            if k != last:
                x = act(x, self.slope) if self.activation == "leaky-affine" else act(x)
        return x

    def forward(self, batch):
        batch = np.asarray(batch, dtype=float)
        inp = ad.Tensor(batch, requires_grad=True)
        out = self.graph(inp)
        self._tape = (inp, out)
        return out.value.copy()

    __call__ = forward

    def backward(self, upstream):
        """Parameter gradient of ``sum(upstream * output)`` for the recorded forward."""
        if self._tape is None:
            raise RuntimeError("backward() called without a recorded forward pass")
        inp, out = self._tape
        self.grad[:] = 0.0
        inp.grad = None
        out.backward(np.asarray(upstream, dtype=float))
        self._tape = None
        self.input_grad = inp.grad
        return self.grad.copy()

    def header(self):
        return {
            "kind": "mlp",
            "widths": list(self.widths),
            "activation": self.activation,
            "slope": self.slope,
            "seed": self.seed,
            "zero_last": self.zero_last,
        }
