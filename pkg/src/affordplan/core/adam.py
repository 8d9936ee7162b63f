"""Adam with bias correction, applied in place to named parameter arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np


@numba.njit(cache=True, fastmath=True, error_model="numpy")
def _adam_kernel(p, g, m, v, lr, b1, b2, eps, c1, c2):
    # p, g, m, v are flat views of one parameter tensor
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def ensure(self, params: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            elif self.m[name].shape != p.shape:
                raise ValueError(f"adam state for {name!r} has shape {self.m[name].shape}, parameter {p.shape}")


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    """One Adam update of ``params`` in place.

    Tensors missing from ``grads`` are skipped, moments included; the step
    counter still advances once per call.
    """
    state.ensure(params)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        dt = p.dtype.type
        _adam_kernel(
            p.reshape(-1),
            np.ascontiguousarray(g, dtype=p.dtype).reshape(-1),
            state.m[name].reshape(-1),
            state.v[name].reshape(-1),
            dt(state.learning_rate),
            dt(state.beta1),
            dt(state.beta2),
            dt(state.epsilon),
            dt(c1),
            dt(c2),
        )
