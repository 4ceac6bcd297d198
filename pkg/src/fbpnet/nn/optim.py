from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .layers import Parameter

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> bool:
    """One bias-corrected Adam update, applied to ``params`` in place.

    A non-finite gradient skips the whole step (nothing changes, the step
    counter included) and returns ``False``.
    """
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {grads[name].shape}, parameter {p.shape}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        log.warning("non-finite gradient at step %d; update skipped", state.step + 1)
        return False

    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


class Adam:
    def __init__(self, params: dict[str, Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self) -> bool:
        return adam_step(
            {k: p.value for k, p in self.params.items()},
            {k: p.grad for k, p in self.params.items()},
            self.state,
        )

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()
