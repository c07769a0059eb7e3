"""AdamW with decoupled weight decay, operating on numpy arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamWState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "AdamWState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamWState,
               cfg: AdamWConfig) -> list[np.ndarray]:
    """Return updated parameters; ``state`` is advanced in place."""
    b1, b2 = cfg.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        new = p * (1.0 - cfg.lr * cfg.weight_decay) if cfg.weight_decay else p
        new = new - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        out.append(new)
    return out


@dataclass
class AdamW:
    """Stateful convenience wrapper around :func:`adamw_step`."""

    cfg: AdamWConfig = field(default_factory=AdamWConfig)
    state: AdamWState | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        if self.state is None:
            self.state = AdamWState.zeros_like(params)
        return adamw_step(params, grads, self.state, self.cfg)
