"""Adam and the warm-up + cosine learning-rate schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from modules.exceptions import ShapeError

if TYPE_CHECKING:
    from modules.autograd import GradMap
    from modules.dtypes import FloatArray
    from modules.params import ModelParams

log = logging.getLogger(__name__)


@dataclass(slots=True)
class AdamState:
    first: dict[str, FloatArray] = field(default_factory=dict)
    second: dict[str, FloatArray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # Names already reported as having no gradient.
    _warned: set[str] = field(default_factory=set, repr=False, compare=False)

    @classmethod
    def for_params(cls, params: ModelParams) -> AdamState:
        return cls(
            first={name: np.zeros_like(t.data) for name, t in params.items()},
            second={name: np.zeros_like(t.data) for name, t in params.items()},
        )


def adam_step(params: ModelParams, grads: GradMap, state: AdamState, lr: float) -> ModelParams:
    """Apply one bias-corrected Adam update in place and advance the state."""
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, tensor in params.items():
        grad = grads.get(tensor)
        if grad is None:
            if name not in state._warned:
                log.warning("No gradient for parameter '%s'; treating it as zero.", name)
                state._warned.add(name)
            grad = np.zeros_like(tensor.data)
        elif grad.shape != tensor.shape:
            msg = f"adam_step: gradient for '{name}' has shape {grad.shape}, expected {tensor.shape}"
            raise ShapeError(msg)
        m = state.first.setdefault(name, np.zeros_like(tensor.data))
        v = state.second.setdefault(name, np.zeros_like(tensor.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        tensor.data = tensor.data - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_frac: float = 0.1) -> float:
    """Linear warm-up from 0 to base_lr, then cosine decay to 0 at total_steps."""
    if total_steps <= 0:
        msg = f"lr_schedule: total_steps must be positive, got {total_steps}"
        raise ValueError(msg)
    step = min(max(step, 0), total_steps)
    warmup = warmup_frac * total_steps
    if step < warmup:
        return base_lr * step / warmup
    span = total_steps - warmup
    if span <= 0:
        return base_lr
    progress = (step - warmup) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
