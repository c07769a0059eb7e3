"""Optimization-based inversion of internal states with white-box model access.

Three attacks share one loop: each optimizes a free variable that maps to
dummy input embeddings, pushes them through the first ``l`` layers, and
matches the observed internal states.

* TS  - soft token-selection matrix ``Z``; embeddings are ``softmax(Z/T) @ E``.
* ER  - the embeddings themselves, starting from zero.
* TBS - coefficients ``z`` on an orthonormal basis of the embedding space;
  embeddings are ``alpha * arctan(z @ B)``.

ER and TBS decode tokens by nearest cosine neighbour in the embedding matrix;
TS decodes by per-row argmax of ``Z``.
"""

from __future__ import annotations

import math
import time
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .. import autodiff as ad
from ..autodiff import Tensor
from ..model import InternalStates, TransformerWeights, forward_prefix
from ..optim import AdamWConfig, AdamWState, adamw_step


class ZeroNormRowWarning(UserWarning):
    pass


@dataclass
class AttackConfig:
    lr: float = 5e-4
    steps: int = 50_000
    penalty: float = 0.0
    distance: str = "mse"
    basis: str = "unbiased"
    alpha: float = 5 / math.pi
    temperature: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    seed: int = 0
    dm_features: int = 4
    dm_hidden: int = 32
    dm_batch: int | None = None
    checkpoint_every: int = 100
    tol: float = 0.0
    explode_threshold: float = 1e12

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.penalty < 0:
            raise ValueError("penalty must be non-negative")
        if self.alpha <= 0 or self.temperature <= 0:
            raise ValueError("alpha and temperature must be positive")
        if self.distance not in ("mse", "cos"):
            raise ValueError(f"unknown distance {self.distance!r}")
        if self.basis not in ("singular", "unbiased"):
            raise ValueError(f"unknown basis {self.basis!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BasisSet:
    B: np.ndarray
    kind: str


@dataclass
class InversionTrace:
    losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    checkpoints: dict[int, np.ndarray] = field(default_factory=dict)
    best_index: int = -1
    exploded: bool = False
    aborted: bool = False


@dataclass
class InversionResult:
    inverted_text: str
    inverted_ids: list[int]
    trace: InversionTrace
    wall_time: float
    attack: str
    flags: dict = field(default_factory=dict)

    @property
    def loss_final(self) -> float:
        t = self.trace
        return t.losses[t.best_index] if t.best_index >= 0 else float("nan")

    def to_report(self, cfg: AttackConfig | None = None, metrics: dict | None = None, max_points: int = 200) -> dict:
        stride = max(1, len(self.trace.losses) // max_points)
        return {
            "attack": self.attack,
            "config": cfg.to_dict() if cfg else None,
            "loss": self.trace.losses[::stride],
            "loss_stride": stride,
            "best_index": self.trace.best_index,
            "exploded": self.trace.exploded,
            "aborted": self.trace.aborted,
            "inverted_text": self.inverted_text,
            "inverted_ids": list(self.inverted_ids),
            "wall_time": self.wall_time,
            "flags": self.flags,
            "metrics": metrics or {},
        }


# -- losses ------------------------------------------------------------

def _target_array(h) -> np.ndarray:
    return np.asarray(h.h if isinstance(h, InternalStates) else h, dtype=np.float64)


def matching_loss(pred: Tensor, target: np.ndarray, distance: str = "mse") -> Tensor:
    """Per-sample distance between internal states over the last two axes."""
    if pred.shape != target.shape:
        raise ad.ShapeError(f"shape mismatch {pred.shape} vs {target.shape}")
    if distance == "mse":
        diff = pred - target
        return ad.mean(diff * diff, axis=(-2, -1))
    dot = (pred * target).sum(axis=-1)
    pn = ad.sqrt((pred * pred).sum(axis=-1))
    tn = np.sqrt((target * target).sum(axis=-1))
    cos = dot / (pn * tn + 1e-12)
    return 1.0 - cos.mean(axis=-1)


def dm_penalty(w_hat, E: np.ndarray, n_features: int = 4, batch: int | None = None,
               seed: int | np.random.Generator = 0, hidden: int = 32) -> Tensor:
    """Distribution-matching penalty between rows of ``w_hat`` and embedding rows.

    Random one-hidden-layer tanh networks with Gaussian weights act as
    feature extractors; the penalty is the mean over networks of the L2
    distance between mean features of a row batch of ``w_hat`` and an
    equal-sized random batch of ``E``. Leading batch axes of ``w_hat`` give
    one penalty per sample.
    """
    w_hat = ad.as_tensor(w_hat)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    squeeze = w_hat.ndim == 2
    if squeeze:
        w_hat = w_hat.reshape(1, *w_hat.shape)
    S, n, d = w_hat.shape
    m = n if batch is None else batch
    if not 1 <= m <= min(n, E.shape[0]):
        raise ValueError(f"batch {m} must be in [1, min({n}, {E.shape[0]})]")
    rows = np.stack([rng.choice(n, m, replace=False) for _ in range(S)])
    e_rows = np.stack([rng.choice(E.shape[0], m, replace=False) for _ in range(S)])
    W = rng.normal(0.0, 1.0 / math.sqrt(d), (d, n_features * hidden))
    x = ad.getitem(w_hat, (np.arange(S)[:, None], rows))
    fx = ad.tanh(x @ W).reshape(S, m, n_features, hidden).mean(axis=1)
    fe = np.tanh(E[e_rows] @ W).reshape(S, m, n_features, hidden).mean(axis=1)
    diff = fx - fe
    dist = ad.sqrt((diff * diff).sum(axis=-1) + 1e-24)
    out = dist.mean(axis=-1)
    return out.reshape(()) if squeeze else out


def inversion_loss(w_hat, h_target, weights: TransformerWeights, layer: int, cfg: AttackConfig,
                   rng: np.random.Generator | None = None) -> Tensor:
    """Per-sample matching loss plus ``cfg.penalty`` times the distribution-matching penalty."""
    target = _target_array(h_target)
    pred = forward_prefix(weights, w_hat, layer)
    loss = matching_loss(pred, target, cfg.distance)
    if cfg.penalty > 0:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        loss = loss + cfg.penalty * dm_penalty(w_hat, weights.embedding, cfg.dm_features,
                                               cfg.dm_batch, rng, cfg.dm_hidden)
    return loss


# -- basis & decoding --------------------------------------------------

def compute_basis(E: np.ndarray, kind: str = "unbiased") -> BasisSet:
    """Orthonormal basis of the embedding space from the SVD of ``E``.

    ``singular``: rows are right-singular vectors by descending singular value.
    ``unbiased``: the transpose of that matrix.
    """
    E = np.asarray(E, dtype=np.float64)
    if E.shape[1] > E.shape[0]:
        raise ValueError("embedding width exceeds vocabulary size")
    try:
        _, _, vt = scipy.linalg.svd(E, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ad.NumericError(f"SVD failed: {exc}") from exc
    if kind == "singular":
        return BasisSet(vt, kind)
    if kind == "unbiased":
        return BasisSet(vt.T.copy(), kind)
    raise ValueError(f"unknown basis kind {kind!r}")


def recover_tokens(w_hat: np.ndarray, E: np.ndarray) -> np.ndarray:
    """Per row, the id of the embedding with maximal cosine similarity (ties: smallest id)."""
    w_hat = np.asarray(w_hat, dtype=np.float64)
    if not np.isfinite(w_hat).all():
        raise ad.NumericError("non-finite embeddings")
    wn = np.linalg.norm(w_hat, axis=-1, keepdims=True)
    zero = wn[..., 0] == 0
    if zero.any():
        warnings.warn(f"{int(zero.sum())} zero-norm rows decoded as token 0", ZeroNormRowWarning, stacklevel=2)
    en = np.linalg.norm(E, axis=-1)
    sims = (w_hat / np.where(wn == 0, 1.0, wn)) @ (E / np.where(en == 0, 1.0, en)[:, None]).T
    ids = np.argmax(sims, axis=-1)
    return np.where(zero, 0, ids)


# -- shared optimization loop -----------------------------------------

@dataclass
class _Parametrization:
    name: str
    init: Callable[[int, int], np.ndarray]
    to_embeddings: Callable[[Tensor], Tensor]
    decode: Callable[[np.ndarray], np.ndarray]


def _parametrization(kind: str, weights: TransformerWeights, cfg: AttackConfig,
                     basis: BasisSet | None = None) -> _Parametrization:
    E = weights.embedding
    d = weights.config.d_model
    V = E.shape[0]
    if kind == "er":
        return _Parametrization("er", lambda S, n: np.zeros((S, n, d)), lambda v: v,
                                lambda x: recover_tokens(x, E))
    if kind == "ts":
        T = cfg.temperature
        Et = Tensor(E)
        return _Parametrization("ts", lambda S, n: np.full((S, n, V), 1.0 / d),
                                lambda v: ad.softmax_row(ad.scale(v, 1.0 / T)) @ Et,
                                lambda x: np.argmax(x, axis=-1))
    if kind == "tbs":
        basis = basis or compute_basis(E, cfg.basis)
        Bt = Tensor(basis.B)
        a = cfg.alpha

        def to_w(v):
            return ad.scale(ad.arctan(v @ Bt), a)

        return _Parametrization("tbs", lambda S, n: np.full((S, n, d), 1.0 / d), to_w,
                                lambda x: recover_tokens(a * np.arctan(x @ basis.B), E))
    raise ValueError(f"unknown attack {kind!r}")


def run_attack(kind: str, targets: Sequence, weights: TransformerWeights, layer: int,
               cfg: AttackConfig, basis: BasisSet | None = None, init: np.ndarray | None = None,
               flags: dict | None = None) -> list[InversionResult]:
    """Invert several targets; equal-length targets are optimized jointly.

    Joint optimization is exact: each sample's loss depends only on its own
    variables and AdamW updates are elementwise.
    """
    arrays = [_target_array(t) for t in targets]
    groups: dict[int, list[int]] = defaultdict(list)
    for i, a in enumerate(arrays):
        groups[a.shape[0]].append(i)
    results: list[InversionResult | None] = [None] * len(arrays)
    for n, idx in sorted(groups.items()):
        stacked = np.stack([arrays[i] for i in idx])
        sub_init = None if init is None else np.stack([init[i] for i in idx])
        for i, r in zip(idx, _optimize(kind, stacked, weights, layer, cfg, basis, sub_init)):
            r.flags.update(flags or {})
            results[i] = r
    return results


def _optimize(kind: str, target: np.ndarray, weights: TransformerWeights, layer: int, cfg: AttackConfig,
              basis: BasisSet | None, init: np.ndarray | None) -> list[InversionResult]:
    t0 = time.perf_counter()
    S, n, _ = target.shape
    par = _parametrization(kind, weights, cfg, basis)
    x = par.init(S, n) if init is None else np.array(init, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    state = AdamWState.zeros_like([x])
    opt = AdamWConfig(lr=cfg.lr, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)
    traces = [InversionTrace() for _ in range(S)]
    best_loss = np.full(S, np.inf)
    best_x = x.copy()
    for step in range(cfg.steps):
        var = Tensor(x, requires_grad=True)
        try:
            per = inversion_loss(par.to_embeddings(var), target, weights, layer, cfg, rng)
            vals = per.data.reshape(S)
            if not np.isfinite(vals).all():
                raise ad.NumericError("non-finite inversion loss")
            (g,) = ad.grad(per.sum(), [var])
        except ad.NumericError:
            for tr in traces:
                tr.aborted = True
            break
        norms = np.sqrt((g * g).reshape(S, -1).sum(axis=1))
        improved = vals < best_loss
        best_loss = np.where(improved, vals, best_loss)
        best_x[improved] = x[improved]
        for s, tr in enumerate(traces):
            tr.losses.append(float(vals[s]))
            tr.grad_norms.append(float(norms[s]))
            if improved[s]:
                tr.best_index = step
            if norms[s] > cfg.explode_threshold:
                tr.exploded = True
            if step % cfg.checkpoint_every == 0:
                tr.checkpoints[step] = x[s].copy()
        if cfg.tol > 0 and (vals <= cfg.tol).all():
            break
        (x,) = adamw_step([x], [g], state, opt)
    ids = par.decode(best_x)
    wall = (time.perf_counter() - t0) / S
    tok = weights.tokenizer
    return [InversionResult(tok.decode(ids[s]), [int(i) for i in ids[s]], traces[s], wall, kind)
            for s in range(S)]


def _single(kind, h_target, weights, cfg, layer, basis=None, init=None) -> InversionResult:
    if layer is None:
        layer = getattr(h_target, "layer", None)
        if layer is None:
            raise ValueError("layer must be given for raw arrays")
    return run_attack(kind, [h_target], weights, layer, cfg, basis,
                      None if init is None else np.asarray(init)[None])[0]


def attack_ts(h_target, weights: TransformerWeights, cfg: AttackConfig, layer: int | None = None) -> InversionResult:
    return _single("ts", h_target, weights, cfg, layer)


def attack_er(h_target, weights: TransformerWeights, cfg: AttackConfig, layer: int | None = None,
              init: np.ndarray | None = None) -> InversionResult:
    return _single("er", h_target, weights, cfg, layer, init=init)


def attack_tbs(h_target, weights: TransformerWeights, cfg: AttackConfig, layer: int | None = None,
               basis: BasisSet | None = None) -> InversionResult:
    return _single("tbs", h_target, weights, cfg, layer, basis=basis)
