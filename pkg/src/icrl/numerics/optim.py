"""Adam with a linear learning-rate warm-up from zero."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, Tensor

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class OptimizerState:
    base_lr: float
    warmup_batches: int = 10
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def effective_lr(self) -> float:
        if self.warmup_batches <= 0:
            return self.base_lr
        return self.base_lr * min(1.0, self.step_count / self.warmup_batches)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
) -> tuple[dict[str, Tensor], OptimizerState]:
    """One Adam update. Returns new parameter tensors and the advanced state.

    The learning rate used is ``base_lr * min(1, step_count / warmup_batches)``
    evaluated before the step counter is incremented, so the very first call
    leaves parameters untouched.
    """
    if state.step_count < 0:
        raise ValueError("step_count must be >= 0")
    lr = state.effective_lr()
    t = state.step_count + 1
    bc1 = 1.0 - BETA1 ** t
    bc2 = 1.0 - BETA2 ** t
    m_new, v_new, out = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name]) if name in grads else np.zeros_like(p.data)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = BETA1 * m + (1.0 - BETA1) * g
        v = BETA2 * v + (1.0 - BETA2) * g * g
        m_new[name], v_new[name] = m.astype(p.dtype), v.astype(p.dtype)
        if lr == 0.0 or not np.any(m):
            out[name] = p
            continue
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + EPS)
        out[name] = Tensor(p.data - update.astype(p.dtype), requires_grad=p.requires_grad, name=p.name)
    new_state = OptimizerState(
        base_lr=state.base_lr,
        warmup_batches=state.warmup_batches,
        step_count=state.step_count + 1,
        first_moment=m_new,
        second_moment=v_new,
    )
    return out, new_state
