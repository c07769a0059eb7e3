"""A small Llama-style decoder-only language model built on :mod:`isinvert.autodiff`.

Blocks are pre-norm (RMSNorm), rotary self-attention with a causal mask, and
a SwiGLU feed-forward. ``forward_prefix(w, l)`` maps input embeddings to the
residual stream after layer ``l``, which is what an observer of internal
states sees.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .optim import AdamWConfig, AdamWState, adamw_step
from .tokenizer import ByteBPETokenizer

log = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"MLMW"


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message: str, last_good: "TransformerWeights | None" = None, step: int = -1):
        super().__init__(message)
        self.last_good = last_good
        self.step = step


@dataclass(frozen=True)
class MicroLMConfig:
    vocab_size: int = 512
    d_model: int = 64
    n_layers: int = 8
    n_heads: int = 4
    ffn_mult: float = 4.0
    qkv_bias: bool = False
    max_seq_len: int = 256
    seed: int = 0
    norm_eps: float = 1e-6
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError("head dimension must be even for rotary encoding")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ffn_dim(self) -> int:
        return int(round(self.ffn_mult * self.d_model))


def _f32_exact(a) -> np.ndarray:
    """Round to the nearest float32 but keep float64 storage, so checkpoints are lossless."""
    out = np.asarray(a, dtype=np.float32).astype(np.float64)
    out.flags.writeable = False
    return out


class TransformerWeights:
    """Immutable parameter set plus the tokenizer it was trained with."""

    def __init__(self, config: MicroLMConfig, params: Mapping[str, np.ndarray],
                 tokenizer: ByteBPETokenizer, meta: dict | None = None):
        self.config = config
        self.params: dict[str, np.ndarray] = {k: _f32_exact(v) for k, v in params.items()}
        self.tokenizer = tokenizer
        self.meta = dict(meta or {})
        self._tensors = {k: Tensor(v) for k, v in self.params.items()}
        self._fingerprint: str | None = None
        if tokenizer.vocab_size > config.vocab_size:
            raise ConfigError("tokenizer vocabulary exceeds model vocabulary")

    @property
    def tensors(self) -> dict[str, Tensor]:
        return self._tensors

    @property
    def embedding(self) -> np.ndarray:
        return self.params["tok_emb"]

    def fingerprint(self) -> str:
        if self._fingerprint is None:
            h = hashlib.sha256()
            for k in sorted(self.params):
                h.update(k.encode())
                h.update(self.params[k].tobytes())
            h.update(repr(self.tokenizer.merges).encode())
            self._fingerprint = h.hexdigest()[:16]
        return self._fingerprint

    def with_params(self, updates: Mapping[str, np.ndarray], **meta) -> "TransformerWeights":
        params = dict(self.params)
        params.update(updates)
        return TransformerWeights(self.config, params, self.tokenizer, {**self.meta, **meta})

    def layer_names(self, i: int) -> list[str]:
        return [k for k in self.params if k.startswith(f"layers.{i}.")]

    def save(self, path: str | Path) -> None:
        tensors = dict(self.params)
        tensors["tokenizer.merges"] = np.asarray(self.tokenizer.merges, dtype=np.float64).reshape(-1, 2)
        checkpoint.save(path, WEIGHTS_MAGIC, {"config": asdict(self.config), "meta": self.meta}, tensors)

    @classmethod
    def load(cls, path: str | Path) -> "TransformerWeights":
        meta, tensors = checkpoint.load(path, WEIGHTS_MAGIC)
        merges = [tuple(int(x) for x in row) for row in tensors.pop("tokenizer.merges")]
        return cls(MicroLMConfig(**meta["config"]), tensors, ByteBPETokenizer(merges), meta.get("meta"))


@dataclass
class InternalStates:
    h: np.ndarray
    layer: int
    model_fingerprint: str

    @property
    def n_tokens(self) -> int:
        return self.h.shape[-2]


@dataclass
class ISRecord:
    text: str
    ids: list[int]
    states: InternalStates
    truncated: bool = False


# -- initialization ----------------------------------------------------

def init_weights(cfg: MicroLMConfig, tokenizer: ByteBPETokenizer) -> TransformerWeights:
    rng = np.random.default_rng(cfg.seed)
    d, f, V = cfg.d_model, cfg.ffn_dim, cfg.vocab_size
    resid_std = 0.02 / math.sqrt(2 * cfg.n_layers)
    p: dict[str, np.ndarray] = {"tok_emb": rng.normal(0.0, 0.02, (V, d))}
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        p[pre + "attn_norm"] = np.ones(d)
        for name in ("wq", "wk", "wv"):
            p[pre + name] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))
        if cfg.qkv_bias:
            for name in ("bq", "bk", "bv"):
                p[pre + name] = np.zeros(d)
        p[pre + "wo"] = rng.normal(0.0, resid_std * 4, (d, d))
        p[pre + "ffn_norm"] = np.ones(d)
        p[pre + "w1"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, f))
        p[pre + "w3"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, f))
        p[pre + "w2"] = rng.normal(0.0, resid_std * 4, (f, d))
    p["final_norm"] = np.ones(d)
    p["lm_head"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, V))
    return TransformerWeights(cfg, p, tokenizer, {"steps": 0})


# -- forward -----------------------------------------------------------

@lru_cache(maxsize=64)
def _rope_tables(n: int, head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    freqs = base ** (-np.arange(half) / half)
    angles = np.arange(n)[:, None] * freqs[None, :]
    angles = np.concatenate([angles, angles], axis=-1)
    return np.cos(angles), np.sin(angles)


@lru_cache(maxsize=64)
def _causal_mask(n: int) -> np.ndarray:
    return np.triu(np.ones((n, n), dtype=bool), 1)


def _block(p: Mapping[str, Tensor], i: int, cfg: MicroLMConfig, x: Tensor) -> Tensor:
    pre = f"layers.{i}."
    B, n, d = x.shape
    H, hd = cfg.n_heads, cfg.head_dim
    a = ad.rmsnorm_row(x, p[pre + "attn_norm"], cfg.norm_eps)
    q, k, v = a @ p[pre + "wq"], a @ p[pre + "wk"], a @ p[pre + "wv"]
    if cfg.qkv_bias:
        q, k, v = q + p[pre + "bq"], k + p[pre + "bk"], v + p[pre + "bv"]
    q = q.reshape(B, n, H, hd).transpose(0, 2, 1, 3)
    k = k.reshape(B, n, H, hd).transpose(0, 2, 1, 3)
    v = v.reshape(B, n, H, hd).transpose(0, 2, 1, 3)
    cos, sin = _rope_tables(n, hd, cfg.rope_base)
    q, k = ad.rope(q, cos, sin), ad.rope(k, cos, sin)
    scores = ad.scale(q @ k.T, 1.0 / math.sqrt(hd))
    att = ad.softmax_row(scores, _causal_mask(n))
    o = (att @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
    x = x + o @ p[pre + "wo"]
    f = ad.rmsnorm_row(x, p[pre + "ffn_norm"], cfg.norm_eps)
    return x + (ad.silu(f @ p[pre + "w1"]) * (f @ p[pre + "w3"])) @ p[pre + "w2"]


def run_layers(p: Mapping[str, Tensor], cfg: MicroLMConfig, h, start: int, stop: int) -> Tensor:
    """Apply blocks ``start+1 .. stop`` (1-based) to ``h`` of shape (n, d) or (B, n, d)."""
    if not 0 <= start <= stop <= cfg.n_layers:
        raise ConfigError(f"layer range ({start}, {stop}] outside 0..{cfg.n_layers}")
    h = ad.as_tensor(h)
    if h.shape[-1] != cfg.d_model:
        raise ad.ShapeError(f"expected width {cfg.d_model}, got {h.shape[-1]}")
    if h.shape[-2] > cfg.max_seq_len:
        raise ConfigError(f"sequence of {h.shape[-2]} tokens exceeds max_seq_len {cfg.max_seq_len}")
    squeeze = h.ndim == 2
    if squeeze:
        h = h.reshape(1, *h.shape)
    for i in range(start, stop):
        h = _block(p, i, cfg, h)
    if squeeze:
        h = h.reshape(h.shape[1:])
    return h


def forward_prefix(weights: TransformerWeights, w, l: int, params: Mapping[str, Tensor] | None = None) -> Tensor:
    """Internal states after layer ``l`` for input embeddings ``w``; ``l=0`` returns ``w``."""
    if not 0 <= l <= weights.config.n_layers:
        raise ConfigError(f"layer {l} outside 0..{weights.config.n_layers}")
    return run_layers(params or weights.tensors, weights.config, w, 0, l)


def embed(weights: TransformerWeights, ids: Sequence[int]) -> np.ndarray:
    return weights.embedding[np.asarray(ids, dtype=np.int64)]


def lm_logits(p: Mapping[str, Tensor], cfg: MicroLMConfig, emb) -> Tensor:
    h = run_layers(p, cfg, emb, 0, cfg.n_layers)
    return ad.rmsnorm_row(h, p["final_norm"], cfg.norm_eps) @ p["lm_head"]


def internal_states(weights: TransformerWeights, ids: Sequence[int], l: int) -> InternalStates:
    h = forward_prefix(weights, embed(weights, ids), l)
    return InternalStates(np.array(h.data), l, weights.fingerprint())


def capture_is(texts: Iterable[str], l: int, weights: TransformerWeights) -> list[ISRecord]:
    """Tokenize each text and record its layer-``l`` internal states (truncating over-long inputs)."""
    max_len = weights.config.max_seq_len
    out = []
    for text in texts:
        ids = weights.tokenizer.encode(text)
        truncated = len(ids) > max_len
        if truncated:
            log.warning("truncating %d-token input to %d", len(ids), max_len)
            ids = ids[:max_len]
        out.append(ISRecord(text, ids, internal_states(weights, ids, l), truncated))
    return out


# -- training ----------------------------------------------------------

def token_stream(tokenizer: ByteBPETokenizer, texts: Sequence[str]) -> np.ndarray:
    return np.asarray(tokenizer.encode("\n".join(texts)), dtype=np.int64)


def _windows(stream: np.ndarray, seq_len: int) -> np.ndarray:
    n = (len(stream) - 1) // seq_len
    if n < 1:
        raise ValueError("corpus shorter than one training window")
    idx = np.arange(n)[:, None] * seq_len + np.arange(seq_len + 1)[None, :]
    return stream[idx]


def heldout_loss(weights: TransformerWeights, texts: Sequence[str], seq_len: int = 64,
                 max_windows: int = 64, embed_noise: tuple[float, int] | None = None) -> float:
    """Mean next-token cross-entropy over deterministic windows of ``texts``.

    ``embed_noise=(sigma, seed)`` perturbs input embeddings with Gaussian noise.
    """
    win = _windows(token_stream(weights.tokenizer, texts), seq_len)[:max_windows]
    emb = weights.embedding[win[:, :-1]]
    if embed_noise is not None and embed_noise[0] > 0:
        sigma, seed = embed_noise
        emb = emb + np.random.default_rng(seed).normal(0.0, sigma, emb.shape)
    logits = lm_logits(weights.tensors, weights.config, emb)
    return float(ad.cross_entropy(logits, win[:, 1:]).item())


@dataclass
class TrainConfig:
    steps: int = 1000
    lr: float = 3e-3
    batch_size: int = 16
    seq_len: int = 64
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    trainable: tuple[str, ...] | None = None
    history: list[float] = field(default_factory=list)


def _fit(init: TransformerWeights, texts: Sequence[str], tc: TrainConfig) -> TransformerWeights:
    cfg = init.config
    if not texts:
        raise ValueError("corpus must be non-empty")
    if tc.steps <= 0:
        return init
    stream = token_stream(init.tokenizer, texts)
    if len(stream) <= tc.seq_len + 1:
        raise ValueError("corpus shorter than one training window")
    rng = np.random.default_rng(tc.seed)
    names = [k for k in init.params if tc.trainable is None or k.startswith(tc.trainable)]
    frozen = {k: t for k, t in init.tensors.items() if k not in names}
    values = [np.array(init.params[k]) for k in names]
    state = AdamWState.zeros_like(values)
    opt = AdamWConfig(lr=tc.lr, weight_decay=tc.weight_decay)
    last_good = init
    for step in range(tc.steps):
        starts = rng.integers(0, len(stream) - tc.seq_len - 1, size=tc.batch_size)
        batch = stream[starts[:, None] + np.arange(tc.seq_len + 1)[None, :]]
        live = [Tensor(v, requires_grad=True) for v in values]
        p = {**frozen, **dict(zip(names, live))}
        emb = ad.getitem(p["tok_emb"], batch[:, :-1])
        loss = ad.cross_entropy(lm_logits(p, cfg, emb), batch[:, 1:])
        lv = loss.item()
        if not np.isfinite(lv):
            raise TrainingError(f"loss diverged at step {step}", last_good, step)
        grads = ad.grad(loss, live)
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        if not np.isfinite(norm):
            raise TrainingError(f"gradient diverged at step {step}", last_good, step)
        if tc.grad_clip and norm > tc.grad_clip:
            grads = [g * (tc.grad_clip / norm) for g in grads]
        values = adamw_step(values, grads, state, opt)
        tc.history.append(lv)
        if (step + 1) % 100 == 0:
            log.info("step %d loss %.4f", step + 1, lv)
            last_good = init.with_params(dict(zip(names, values)))
    return init.with_params(dict(zip(names, values)), steps=init.meta.get("steps", 0) + tc.steps)


def train_lm(corpus: Sequence[str], cfg: MicroLMConfig, steps: int = 1000, lr: float = 3e-3,
             tokenizer: ByteBPETokenizer | None = None, **kw) -> TransformerWeights:
    """Train from a seeded initialization; the tokenizer is learned from ``corpus`` if absent."""
    if not corpus:
        raise ValueError("corpus must be non-empty")
    tokenizer = tokenizer or ByteBPETokenizer.train(corpus, cfg.vocab_size)
    init = init_weights(cfg, tokenizer)
    return _fit(init, corpus, TrainConfig(steps=steps, lr=lr, seed=kw.pop("seed", cfg.seed), **kw))


def finetune_lm(base: TransformerWeights, corpus: Sequence[str], steps: int = 300, lr: float = 1e-3,
                **kw) -> TransformerWeights:
    return _fit(base, corpus, TrainConfig(steps=steps, lr=lr, **kw))


def interpolate(a: TransformerWeights, b: TransformerWeights, t: float = 0.5) -> TransformerWeights:
    """Weight-space merge ``(1-t)·a + t·b`` of two models sharing an architecture."""
    if a.config != b.config:
        raise ConfigError("cannot merge models with different configs")
    return a.with_params({k: (1 - t) * a.params[k] + t * b.params[k] for k in a.params}, merged=True)
