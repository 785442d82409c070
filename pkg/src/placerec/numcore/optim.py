"""Adam with bias correction, as a pure step function plus a thin optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from placerec.errors import NumericError
from placerec.numcore.nn import Parameter


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState):
    """One Adam update. Returns ``(new_params, new_state)``; inputs are not mutated."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    m = state.first_moment or [np.zeros_like(p) for p in params]
    v = state.second_moment or [np.zeros_like(p) for p in params]
    if len(m) != len(params) or len(v) != len(params):
        raise ValueError("moment buffers do not match the parameter list")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    new_params, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        if p.shape != g.shape or p.shape != mi.shape or p.shape != vi.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moments {mi.shape}")
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient passed to adam_step")
        mi = b1 * mi + (1.0 - b1) * g
        vi = b2 * vi + (1.0 - b2) * (g * g)
        m_hat = mi / corr1
        v_hat = vi / corr2
        new_params.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon))
        new_m.append(mi)
        new_v.append(vi)
    new_state = AdamState(state.learning_rate, b1, b2, state.epsilon, t, new_m, new_v)
    return new_params, new_state


class Adam:
    """Adam over named parameter groups, each with its own learning rate."""

    def __init__(self, groups: dict[str, list[Parameter]], lrs: dict[str, float],
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = {name: list(ps) for name, ps in groups.items() if ps}
        self.states = {
            name: AdamState(lrs[name], betas[0], betas[1], eps) for name in self.groups
        }

    def set_lr(self, name: str, lr: float) -> None:
        if name in self.states:
            self.states[name].learning_rate = lr

    def step(self) -> None:
        for name, params in self.groups.items():
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            new, self.states[name] = adam_step([p.data for p in params], grads, self.states[name])
            for p, value in zip(params, new):
                if p.min_value is not None:
                    value = np.maximum(value, p.min_value)
                p.data = value.astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for params in self.groups.values():
            for p in params:
                p.grad = None
