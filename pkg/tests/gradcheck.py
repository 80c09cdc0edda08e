"""Central finite differences against the tape."""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from modules import autograd as ag
from modules.autograd import Tensor

EPS = 1e-6


def analytic(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    with ag.recording():
        loss = loss_fn()
    grads = ag.backward(loss)
    return [grads[t].copy() for t in tensors]


def numeric(loss_fn: Callable[[], Tensor], tensor: Tensor, indices: Sequence[tuple[int, ...]] | None = None) -> np.ndarray:
    """d loss / d tensor at `indices` (all entries by default); other entries stay 0."""
    grad = np.zeros_like(tensor.data)
    picks = list(np.ndindex(tensor.shape)) if indices is None else indices
    for idx in picks:
        original = tensor.data[idx]
        tensor.data[idx] = original + EPS
        with ag.paused():
            up = loss_fn().item()
        tensor.data[idx] = original - EPS
        with ag.paused():
            down = loss_fn().item()
        tensor.data[idx] = original
        grad[idx] = (up - down) / (2 * EPS)
    return grad


def sample_indices(shape: tuple[int, ...], count: int, seed: int = 0) -> list[tuple[int, ...]]:
    rng = np.random.default_rng(seed)
    flat = rng.choice(int(np.prod(shape)), size=min(count, int(np.prod(shape))), replace=False)
    return [tuple(int(i) for i in np.unravel_index(f, shape)) for f in flat]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def assert_gradients_match(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    *,
    per_tensor: int | None = None,
    tolerance: float = 1e-4,
) -> None:
    for tensor, grad in zip(tensors, analytic(loss_fn, tensors), strict=True):
        picks = None if per_tensor is None else sample_indices(tensor.shape, per_tensor)
        approx = numeric(loss_fn, tensor, picks)
        if picks is not None:
            mask = np.zeros(tensor.shape, dtype=bool)
            for idx in picks:
                mask[idx] = True
            grad = np.where(mask, grad, 0.0)
        err = relative_error(grad, approx)
        assert err < tolerance, f"gradient mismatch for tensor {tensor.shape}: relative error {err:.2e}"
