"""Client-side defenses applied before internal states are released.

Every defense is a pure function of (input, parameters, seed) and never
modifies its input in place.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import InternalStates, TransformerWeights

QUANTIZED_SUFFIXES = ("wq", "wk", "wv", "wo", "w1", "w2", "w3", "lm_head")


class DefenseConfigError(ValueError):
    pass


@dataclass
class DefenseConfig:
    kind: str = "none"
    p: float = 0.0
    sigma: float = 0.0
    epsilon: float = 1.0
    clip: float = 10.0
    bits: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "dropout", "gaussian_embed", "laplace_dp", "quantize"):
            raise DefenseConfigError(f"unknown defense {self.kind!r}")
        if not 0 <= self.p < 1:
            raise DefenseConfigError("dropout p must lie in [0, 1)")
        if self.sigma < 0:
            raise DefenseConfigError("sigma must be non-negative")
        if self.epsilon <= 0 or self.clip <= 0:
            raise DefenseConfigError("epsilon and clip must be positive")
        if self.bits not in (4, 8):
            raise DefenseConfigError("bits must be 4 or 8")


def _unwrap(h):
    if isinstance(h, InternalStates):
        return h.h, lambda arr: replace(h, h=arr)
    return np.asarray(h, dtype=np.float64), lambda arr: arr


def defend_dropout(h, p: float, seed: int = 0):
    """Zero each entry with probability ``p``; scale survivors by ``1/(1-p)``."""
    if not 0 <= p < 1:
        raise DefenseConfigError("dropout p must lie in [0, 1)")
    arr, wrap = _unwrap(h)
    keep = np.random.default_rng(seed).random(arr.shape) >= p
    return wrap(np.where(keep, arr / (1.0 - p), 0.0))


def defend_gaussian_embed(w: np.ndarray, sigma: float, seed: int = 0) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) noise to input embeddings."""
    if sigma < 0:
        raise DefenseConfigError("sigma must be non-negative")
    w = np.asarray(w, dtype=np.float64)
    if sigma == 0:
        return w.copy()
    return w + np.random.default_rng(seed).normal(0.0, sigma, w.shape)


def laplace_noise(shape, scale: float, seed: int) -> np.ndarray:
    """Laplace(0, scale) by inverse CDF, so one seed gives noise proportional to ``scale``."""
    u = np.random.default_rng(seed).random(shape) - 0.5
    return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def defend_laplace_dp(h, epsilon: float, clip: float, seed: int = 0):
    """Clip entries to [-C, C], then add Laplace noise of scale 2C/epsilon.

    The whole matrix is one release; noise is drawn per entry.
    """
    if epsilon <= 0 or clip <= 0:
        raise DefenseConfigError("epsilon and clip must be positive")
    arr, wrap = _unwrap(h)
    clipped = np.clip(arr, -clip, clip)
    return wrap(clipped + laplace_noise(arr.shape, 2.0 * clip / epsilon, seed))


def quantize_tensor(w: np.ndarray, bits: int) -> np.ndarray:
    """Symmetric per-tensor uniform quantize-dequantize."""
    if bits not in (4, 8):
        raise DefenseConfigError("bits must be 4 or 8")
    qmax = 2 ** (bits - 1) - 1
    peak = float(np.abs(w).max()) if w.size else 0.0
    if peak == 0:
        return np.zeros_like(w, dtype=np.float64)
    step = peak / qmax
    return np.clip(np.round(w / step), -qmax, qmax) * step


def defend_quantize(weights: TransformerWeights, bits: int) -> TransformerWeights:
    """Quantize every linear projection; embeddings and norm gains stay full precision."""
    updates = {k: quantize_tensor(v, bits) for k, v in weights.params.items()
               if k.endswith(QUANTIZED_SUFFIXES)}
    return weights.with_params(updates, quantized_bits=bits)


def apply_is_defense(h, cfg: DefenseConfig):
    """Dispatch the defenses that act on released internal states."""
    if cfg.kind == "dropout":
        return defend_dropout(h, cfg.p, cfg.seed)
    if cfg.kind == "laplace_dp":
        return defend_laplace_dp(h, cfg.epsilon, cfg.clip, cfg.seed)
    return h
