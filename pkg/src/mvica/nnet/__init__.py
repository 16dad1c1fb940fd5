"""Minimal differentiable core: reverse-mode graphs, MLPs, Adam, snapshots."""
from .autodiff import Tensor
from .mlp import Mlp
from .optim import Adam, NonFiniteError, step
from . import autodiff, serialize


def forward(net: Mlp, batch):
    return net.forward(batch)


def backward(net: Mlp, batch, upstream):
    """Gradient of ``sum(upstream * net(batch))`` with respect to the parameters.

    ``batch`` must be the batch of the most recent :func:`forward` call.
    """
    tape = net._tape
    if tape is None:
        raise RuntimeError("backward() called without a recorded forward pass")
    if tape[0].value.shape != batch.shape or not (tape[0].value == batch).all():
        raise RuntimeError("backward() batch differs from the recorded forward pass")
    return net.backward(upstream)


__all__ = ["Tensor", "Mlp", "Adam", "NonFiniteError", "step", "forward", "backward", "autodiff", "serialize"]
