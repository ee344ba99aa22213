"""Adam with bias correction and a step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TrainingError(RuntimeError):
    pass


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()}, 0)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update. Returns new ``(params, state)``; inputs are not modified."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingError(f"non-finite gradient in {', '.join(bad)} at step {state.t + 1}")
    if set(grads) != set(params):
        raise ValueError("gradient names do not match parameter names")
    t = state.t + 1
    m, v, out = {}, {}, {}
    c1, c2 = 1 - beta1 ** t, 1 - beta2 ** t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient {k} has shape {g.shape}, parameter has {p.shape}")
        m[k] = beta1 * state.m[k] + (1 - beta1) * g
        v[k] = beta2 * state.v[k] + (1 - beta2) * g * g
        out[k] = p - lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + eps)
    return out, AdamState(m, v, t)


def step_decay(base_lr: float, epoch: int, every: int = 5, factor: float = 0.1) -> float:
    return base_lr * factor ** (epoch // every)
