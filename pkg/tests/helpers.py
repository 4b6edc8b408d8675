"""Shared test utilities: finite-difference gradients and tiny fixtures."""

import numpy as np

from oodtune import tensor as T
from oodtune.model import ClassBank, Encoder

FD_STEP = 1e-5


def central_diff(f, x0: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    for i in range(x0.size):
        plus = x0.copy()
        plus[i] += step
        minus = x0.copy()
        minus[i] -= step
        grad[i] = (f(plus) - f(minus)) / (2.0 * step)
    return grad


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def tape_grad(build_loss, inputs: list[T.Tensor]) -> list[np.ndarray]:
    """Run build_loss() under a fresh tape and return grads of `inputs`."""
    for t in inputs:
        t.zero_grad()
    with T.Tape() as tape:
        loss = build_loss()
        tape.backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]


def random_bank(rng: np.random.Generator, num_classes: int, dim: int) -> ClassBank:
    rows = rng.standard_normal((num_classes, dim))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return ClassBank(rows, [f"c{i}" for i in range(num_classes)])


def identity_encoder(dim: int) -> Encoder:
    """Encoder whose affine maps are identities and whose nonlinearity is
    bypassed, so embed() reduces to rowwise L2 normalization."""
    enc = Encoder(
        w1=T.Tensor(np.eye(dim), requires_grad=True),
        b1=T.Tensor(np.zeros(dim), requires_grad=True),
        w2=T.Tensor(np.eye(dim), requires_grad=True),
        b2=T.Tensor(np.zeros(dim), requires_grad=True),
        skip_nonlinearity=True,
    )
    return enc
