"""Black-box pipeline: identify the model family, replicate it, or learn an inverter.

Model-type identification trains one autoencoder per known base model on
mean-pooled internal states of a fixed probe set, and labels a victim by the
autoencoder with the smallest reconstruction RMSE among those under their
thresholds. Replication finetunes the identified base so its states match
the victim's on adversary data, after which white-box TBS runs on the
replica. When no family matches, an encoder-decoder inverter maps projected
internal states straight back to tokens.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .. import autodiff as ad
from .. import checkpoint
from ..autodiff import Tensor
from ..model import ConfigError, ISRecord, TrainingError, TransformerWeights, run_layers
from ..optim import AdamWConfig, AdamWState, adamw_step
from .whitebox import AttackConfig, BasisSet, InversionResult, run_attack

log = logging.getLogger(__name__)

DETECTOR_MAGIC = b"AEDT"
INVERTER_MAGIC = b"IVRT"
INDEPENDENT = "independent"


def _adam_fit(params: dict[str, np.ndarray], loss_fn, batches, lr: float, weight_decay: float = 0.0):
    """Run AdamW over ``batches``; returns (params, per-step losses)."""
    names = list(params)
    values = [params[k] for k in names]
    state = AdamWState.zeros_like(values)
    opt = AdamWConfig(lr=lr, weight_decay=weight_decay)
    losses = []
    for batch in batches:
        live = {k: Tensor(v, requires_grad=True) for k, v in zip(names, values)}
        loss = loss_fn(live, batch)
        lv = loss.item()
        if not np.isfinite(lv):
            raise TrainingError(f"loss diverged at step {len(losses)}", step=len(losses))
        grads = ad.grad(loss, [live[k] for k in names])
        values = adamw_step(values, grads, state, opt)
        losses.append(lv)
    return dict(zip(names, values)), losses


# -- autoencoders --------------------------------------------------------

def pool_states(records: Sequence[ISRecord] | Sequence[np.ndarray]) -> np.ndarray:
    """Mean-pool each (n_tokens, d) state matrix into one d-vector."""
    rows = [(r.states.h if isinstance(r, ISRecord) else np.asarray(r)).mean(axis=0) for r in records]
    return np.stack(rows)


@dataclass
class Autoencoder:
    """Three linear layers d -> hidden -> bottleneck -> d with tanh, on standardized inputs."""

    params: dict[str, np.ndarray]
    mean: np.ndarray
    std: np.ndarray
    epochs: int = 0
    history: list[float] = field(default_factory=list)

    @property
    def width(self) -> int:
        return self.mean.shape[0]

    def _forward(self, p: Mapping, x) -> Tensor:
        z = ad.tanh(x @ p["w1"] + p["b1"])
        z = ad.tanh(z @ p["w2"] + p["b2"])
        return z @ p["w3"] + p["b3"]

    def errors(self, x: np.ndarray) -> np.ndarray:
        """Per-row reconstruction RMSE in standardized units."""
        xs = (np.asarray(x, dtype=np.float64) - self.mean) / self.std
        rec = self._forward({k: Tensor(v) for k, v in self.params.items()}, Tensor(xs)).data
        return np.sqrt(((rec - xs) ** 2).mean(axis=-1))

    def rmse(self, x: np.ndarray) -> float:
        """RMSE over a whole probe set (order invariant)."""
        e = self.errors(x)
        return float(np.sqrt((e ** 2).mean()))


def _init_autoencoder(d: int, hidden: int, bottleneck: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    def lin(i, o):
        return rng.normal(0.0, 1.0 / math.sqrt(i), (i, o))

    return {"w1": lin(d, hidden), "b1": np.zeros(hidden), "w2": lin(hidden, bottleneck),
            "b2": np.zeros(bottleneck), "w3": lin(bottleneck, d), "b3": np.zeros(d)}


def train_autoencoder(data: np.ndarray, epochs: int = 10, bottleneck: int = 8, hidden: int = 32,
                      lr: float = 3e-3, batch_size: int = 32, seed: int = 0) -> Autoencoder:
    """Fit an autoencoder on pooled internal-state vectors (rows of ``data``)."""
    data = np.asarray(data, dtype=np.float64)
    rng = np.random.default_rng(seed)
    mean = data.mean(axis=0)
    std = data.std(axis=0) + 1e-6
    ae = Autoencoder(_init_autoencoder(data.shape[1], hidden, bottleneck, rng), mean, std)
    if epochs <= 0:
        return ae
    xs = (data - mean) / std

    def batches():
        for _ in range(epochs):
            order = rng.permutation(len(xs))
            for i in range(0, len(xs), batch_size):
                yield xs[order[i:i + batch_size]]

    def loss_fn(p, x):
        diff = ae._forward(p, Tensor(x)) - x
        return ad.mean(diff * diff)

    ae.params, ae.history = _adam_fit(ae.params, loss_fn, batches(), lr)
    ae.epochs = epochs
    return ae


@dataclass
class EnsembleDetector:
    labels: list[str]
    autoencoders: list[Autoencoder]
    thresholds: list[float]

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("detector labels must be unique")

    @classmethod
    def fit(cls, pooled: Mapping[str, np.ndarray], epochs: int = 10, bottleneck: int = 8,
            holdout: float = 0.2, percentile: float = 99.0, seed: int = 0, **kw) -> "EnsembleDetector":
        """One autoencoder per label; each threshold is the given percentile of its own held-out RMSE."""
        labels, aes, taus = [], [], []
        for i, (label, x) in enumerate(pooled.items()):
            x = np.asarray(x)
            cut = max(1, int(round(len(x) * (1 - holdout))))
            ae = train_autoencoder(x[:cut], epochs, bottleneck, seed=seed + i, **kw)
            held = x[cut:] if cut < len(x) else x
            labels.append(label)
            aes.append(ae)
            taus.append(float(np.percentile(ae.errors(held), percentile)))
        return cls(labels, aes, taus)

    def scores(self, probe: np.ndarray) -> list[float]:
        return [ae.rmse(probe) for ae in self.autoencoders]

    def save(self, path: str | Path) -> None:
        tensors = {}
        for i, ae in enumerate(self.autoencoders):
            for k, v in ae.params.items():
                tensors[f"{i}.{k}"] = v
            tensors[f"{i}.mean"] = ae.mean
            tensors[f"{i}.std"] = ae.std
        checkpoint.save(path, DETECTOR_MAGIC, {"labels": self.labels, "thresholds": self.thresholds}, tensors)

    @classmethod
    def load(cls, path: str | Path) -> "EnsembleDetector":
        meta, t = checkpoint.load(path, DETECTOR_MAGIC)
        aes = []
        for i in range(len(meta["labels"])):
            params = {k: t[f"{i}.{k}"] for k in ("w1", "b1", "w2", "b2", "w3", "b3")}
            aes.append(Autoencoder(params, t[f"{i}.mean"], t[f"{i}.std"]))
        return cls(meta["labels"], aes, meta["thresholds"])


def detect_model_type(probe: np.ndarray, detector: EnsembleDetector, tau: float | None = None) -> str:
    """Label of the lowest-RMSE autoencoder under its threshold, else ``"independent"``.

    ``tau`` overrides every per-autoencoder threshold. Ties go to the earlier label.
    """
    probe = np.asarray(probe, dtype=np.float64)
    if probe.size == 0:
        raise ValueError("empty probe set")
    best, best_score = INDEPENDENT, math.inf
    for label, score, thr in zip(detector.labels, detector.scores(probe), detector.thresholds):
        limit = thr if tau is None else tau
        if score <= limit and score < best_score:
            best, best_score = label, score
    return best


# -- replication -----------------------------------------------------------

@dataclass
class ReplicationReport:
    losses: list[float]
    eval_losses: list[float]
    best_eval: float
    pre_loss: float


def _pad_batch(ids_list: Sequence[Sequence[int]], targets: Sequence[np.ndarray]):
    n = max(len(i) for i in ids_list)
    d = targets[0].shape[1]
    ids = np.zeros((len(ids_list), n), dtype=np.int64)
    tgt = np.zeros((len(ids_list), n, d))
    mask = np.zeros((len(ids_list), n, 1))
    for b, (i, t) in enumerate(zip(ids_list, targets)):
        ids[b, :len(i)] = i
        tgt[b, :len(i)] = t
        mask[b, :len(i)] = 1.0
    return ids, tgt, mask


def is_mse(weights: TransformerWeights, pairs: Sequence[tuple[Sequence[int], np.ndarray]], layer: int) -> float:
    """Mean squared difference between this model's layer states and the recorded ones."""
    total, count = 0.0, 0
    for ids, h in pairs:
        pred = run_layers(weights.tensors, weights.config, weights.embedding[np.asarray(ids)], 0, layer).data
        total += float(((pred - h) ** 2).sum())
        count += h.size
    return total / count


def replicate_model(base: TransformerWeights, pairs: Sequence[tuple[Sequence[int], np.ndarray]], layer: int,
                    steps: int = 300, lr: float = 1e-3, batch_size: int = 16, seed: int = 0,
                    eval_pairs: Sequence | None = None, eval_every: int = 25,
                    report: list | None = None) -> TransformerWeights:
    """Finetune the embedding and layers up to ``layer`` of ``base`` to reproduce observed states.

    Only the (token ids, states) pairs are consulted; victim weights are never needed.
    Returns the parameters with the lowest evaluation loss seen.
    """
    cfg = base.config
    if not pairs:
        raise ValueError("no replication pairs")
    if any(h.shape[-1] != cfg.d_model for _, h in pairs):
        raise ConfigError("victim state width differs from base model width")
    if not 1 <= layer <= cfg.n_layers:
        raise ConfigError(f"layer {layer} outside 1..{cfg.n_layers}")
    eval_pairs = list(eval_pairs) if eval_pairs is not None else list(pairs)
    names = ["tok_emb"] + [k for i in range(layer) for k in base.layer_names(i)]
    frozen = {k: t for k, t in base.tensors.items() if k not in names}
    rng = np.random.default_rng(seed)
    values = [np.array(base.params[k]) for k in names]
    state = AdamWState.zeros_like(values)
    opt = AdamWConfig(lr=lr)
    pre = is_mse(base, eval_pairs, layer)
    best, best_vals = pre, [v.copy() for v in values]
    losses, evals = [], [pre]
    for step in range(steps):
        pick = rng.choice(len(pairs), size=min(batch_size, len(pairs)), replace=False)
        ids, tgt, mask = _pad_batch([pairs[i][0] for i in pick], [pairs[i][1] for i in pick])
        live = [Tensor(v, requires_grad=True) for v in values]
        p = {**frozen, **dict(zip(names, live))}
        pred = run_layers(p, cfg, ad.getitem(p["tok_emb"], ids), 0, layer)
        diff = (pred - tgt) * mask
        loss = (diff * diff).sum() / float(mask.sum() * cfg.d_model)
        lv = loss.item()
        if not np.isfinite(lv):
            raise TrainingError(f"replication diverged at step {step}", step=step)
        values = adamw_step(values, ad.grad(loss, live), state, opt)
        losses.append(lv)
        if (step + 1) % eval_every == 0 or step + 1 == steps:
            cand = base.with_params(dict(zip(names, values)))
            ev = is_mse(cand, eval_pairs, layer)
            evals.append(ev)
            if ev < best:
                best, best_vals = ev, [v.copy() for v in values]
    if report is not None:
        report.append(ReplicationReport(losses, evals, best, pre))
    return base.with_params(dict(zip(names, best_vals)), replicated_layer=layer)


def attack_transferred(h_target, replica: TransformerWeights, cfg: AttackConfig, layer: int | None = None,
                       basis: BasisSet | None = None) -> InversionResult:
    """White-box TBS against a replica (or raw base); result flagged black-box."""
    if layer is None:
        layer = h_target.layer
    return run_attack("tbs", [h_target], replica, layer, cfg, basis, flags={"black_box": True})[0]


# -- generative inverter ---------------------------------------------------

@dataclass
class InverterConfig:
    d_in: int = 64
    d_enc: int = 128
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_mult: float = 2.0
    vocab_size: int = 512
    max_seq_len: int = 64
    use_projection: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.use_projection and self.d_enc != self.d_in:
            raise ConfigError("without a projection module d_enc must equal d_in")
        if self.d_enc % self.n_heads:
            raise ConfigError("d_enc must be divisible by n_heads")

    @property
    def bos(self) -> int:
        return self.vocab_size

    @property
    def eos(self) -> int:
        return self.vocab_size + 1

    @property
    def out_vocab(self) -> int:
        return self.vocab_size + 2


def _init_inverter(cfg: InverterConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    d, f = cfg.d_enc, int(cfg.ffn_mult * cfg.d_enc)
    L = cfg.max_seq_len + 1

    def lin(i, o, s=1.0):
        return rng.normal(0.0, s / math.sqrt(i), (i, o))

    p = {}
    if cfg.use_projection:
        p["proj.w"] = lin(cfg.d_in, d)
        p["proj.b"] = np.zeros(d)
    p["enc.pos"] = rng.normal(0.0, 0.02, (L, d))
    p["dec.pos"] = rng.normal(0.0, 0.02, (L, d))
    p["dec.tok"] = rng.normal(0.0, 0.02, (cfg.out_vocab, d))
    for side, n, cross in (("enc", cfg.enc_layers, False), ("dec", cfg.dec_layers, True)):
        for i in range(n):
            pre = f"{side}.{i}."
            attns = ("self", "cross") if cross else ("self",)
            for a in attns:
                p[pre + a + ".norm"] = np.ones(d)
                for m in ("q", "k", "v"):
                    p[pre + a + "." + m] = lin(d, d)
                p[pre + a + ".o"] = lin(d, d, 0.5)
            p[pre + "ffn.norm"] = np.ones(d)
            p[pre + "ffn.w1"] = lin(d, f)
            p[pre + "ffn.w2"] = lin(f, d, 0.5)
    p["enc.norm"] = np.ones(d)
    p["dec.norm"] = np.ones(d)
    p["head"] = lin(d, cfg.out_vocab)
    return p


def _mha(p, pre: str, cfg: InverterConfig, xq: Tensor, xkv: Tensor, mask) -> Tensor:
    B, nq, d = xq.shape
    nk = xkv.shape[1]
    H, hd = cfg.n_heads, d // cfg.n_heads
    q = (xq @ p[pre + ".q"]).reshape(B, nq, H, hd).transpose(0, 2, 1, 3)
    k = (xkv @ p[pre + ".k"]).reshape(B, nk, H, hd).transpose(0, 2, 1, 3)
    v = (xkv @ p[pre + ".v"]).reshape(B, nk, H, hd).transpose(0, 2, 1, 3)
    att = ad.softmax_row(ad.scale(q @ k.T, 1.0 / math.sqrt(hd)), mask)
    return (att @ v).transpose(0, 2, 1, 3).reshape(B, nq, d) @ p[pre + ".o"]


def _ffn(p, pre: str, x: Tensor) -> Tensor:
    f = ad.rmsnorm_row(x, p[pre + "ffn.norm"])
    return ad.silu(f @ p[pre + "ffn.w1"]) @ p[pre + "ffn.w2"]


class InverterModel:
    """Encoder-decoder mapping projected internal states to token ids."""

    def __init__(self, cfg: InverterConfig, params: dict[str, np.ndarray] | None = None, layer: int | None = None):
        self.cfg = cfg
        self.params = params if params is not None else _init_inverter(cfg)
        self.layer = layer
        self.history: list[float] = []

    def const(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.params.items()}

    def encode(self, p, h: np.ndarray, key_pad: np.ndarray) -> Tensor:
        cfg = self.cfg
        n = h.shape[1]
        x = (Tensor(h) @ p["proj.w"] + p["proj.b"]) if cfg.use_projection else Tensor(h)
        x = x + ad.getitem(p["enc.pos"], slice(0, n))
        mask = key_pad[:, None, None, :]
        for i in range(cfg.enc_layers):
            pre = f"enc.{i}."
            a = ad.rmsnorm_row(x, p[pre + "self.norm"])
            x = x + _mha(p, pre + "self", cfg, a, a, mask)
            x = x + _ffn(p, pre, x)
        return ad.rmsnorm_row(x, p["enc.norm"])

    def decode_logits(self, p, memory: Tensor, key_pad: np.ndarray, dec_in: np.ndarray) -> Tensor:
        cfg = self.cfg
        n = dec_in.shape[1]
        x = ad.getitem(p["dec.tok"], dec_in) + ad.getitem(p["dec.pos"], slice(0, n))
        causal = np.triu(np.ones((n, n), dtype=bool), 1)[None, None]
        cross_mask = key_pad[:, None, None, :]
        for i in range(cfg.dec_layers):
            pre = f"dec.{i}."
            a = ad.rmsnorm_row(x, p[pre + "self.norm"])
            x = x + _mha(p, pre + "self", cfg, a, a, causal)
            a = ad.rmsnorm_row(x, p[pre + "cross.norm"])
            x = x + _mha(p, pre + "cross", cfg, a, memory, cross_mask)
            x = x + _ffn(p, pre, x)
        return ad.rmsnorm_row(x, p["dec.norm"]) @ p["head"]

    def save(self, path: str | Path) -> None:
        checkpoint.save(path, INVERTER_MAGIC, {"config": asdict(self.cfg), "layer": self.layer}, self.params)

    @classmethod
    def load(cls, path: str | Path) -> "InverterModel":
        meta, params = checkpoint.load(path, INVERTER_MAGIC)
        return cls(InverterConfig(**meta["config"]), params, meta.get("layer"))


def _pad_states(hs: Sequence[np.ndarray], max_len: int):
    hs = [h[:max_len] for h in hs]
    n = max(len(h) for h in hs)
    out = np.zeros((len(hs), n, hs[0].shape[1]))
    pad = np.ones((len(hs), n), dtype=bool)
    for b, h in enumerate(hs):
        out[b, :len(h)] = h
        pad[b, :len(h)] = False
    return out, pad


def _teacher_batch(cfg: InverterConfig, ids_list: Sequence[Sequence[int]]):
    ids_list = [list(i)[:cfg.max_seq_len] for i in ids_list]
    n = max(len(i) for i in ids_list) + 1
    dec_in = np.full((len(ids_list), n), cfg.eos, dtype=np.int64)
    tgt = np.full((len(ids_list), n), cfg.eos, dtype=np.int64)
    w = np.zeros((len(ids_list), n))
    for b, ids in enumerate(ids_list):
        dec_in[b, 0] = cfg.bos
        dec_in[b, 1:len(ids) + 1] = ids
        tgt[b, :len(ids)] = ids
        tgt[b, len(ids)] = cfg.eos
        w[b, :len(ids) + 1] = 1.0
    return dec_in, tgt, w


def train_inverter(pairs: Sequence[tuple[Sequence[int], np.ndarray]], cfg: InverterConfig | None = None,
                   epochs: int = 10, lr: float = 2e-3, batch_size: int = 32, layer: int | None = None,
                   seed: int = 0) -> InverterModel:
    """Teacher-forced training on (token ids, internal states) pairs.

    Inputs longer than ``cfg.max_seq_len`` are truncated, never dropped.
    """
    if not pairs:
        raise ValueError("no training pairs")
    cfg = cfg or InverterConfig(d_in=pairs[0][1].shape[1])
    model = InverterModel(cfg, layer=layer)
    if epochs <= 0:
        return model
    rng = np.random.default_rng(seed)
    order_len = np.array([len(i) for i, _ in pairs])

    def batches():
        for _ in range(epochs):
            # bucket by length to limit padding, then shuffle buckets
            perm = rng.permutation(len(pairs))
            perm = perm[np.argsort(order_len[perm], kind="stable")]
            chunks = [perm[i:i + batch_size] for i in range(0, len(perm), batch_size)]
            for j in rng.permutation(len(chunks)):
                yield chunks[j]

    def loss_fn(p, idx):
        h, pad = _pad_states([pairs[i][1] for i in idx], cfg.max_seq_len)
        dec_in, tgt, w = _teacher_batch(cfg, [pairs[i][0] for i in idx])
        memory = model.encode(p, h, pad)
        return ad.cross_entropy(model.decode_logits(p, memory, pad, dec_in), tgt, w)

    model.params, model.history = _adam_fit(model.params, loss_fn, batches(), lr)
    return model


def invert_generate(h, model: InverterModel, max_out: int | None = None) -> list[int]:
    """Greedy decoding of one state matrix; returns token ids without the end marker."""
    return invert_generate_batch([h], model, max_out)[0]


def invert_generate_batch(hs: Sequence, model: InverterModel, max_out: int | None = None) -> list[list[int]]:
    cfg = model.cfg
    max_out = min(max_out or cfg.max_seq_len, cfg.max_seq_len)
    arrays = [np.asarray(h.h if hasattr(h, "h") else h, dtype=np.float64) for h in hs]
    if any(a.shape[-1] != cfg.d_in for a in arrays):
        raise ad.ShapeError(f"inverter expects width {cfg.d_in}")
    p = model.const()
    h, pad = _pad_states(arrays, cfg.max_seq_len)
    memory = model.encode(p, h, pad)
    B = len(arrays)
    seqs = np.full((B, 1), cfg.bos, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    out: list[list[int]] = [[] for _ in range(B)]
    for _ in range(max_out):
        logits = model.decode_logits(p, memory, pad, seqs).data[:, -1]
        nxt = np.argmax(logits, axis=-1)
        for b in range(B):
            if not done[b]:
                if nxt[b] == cfg.eos:
                    done[b] = True
                elif nxt[b] < cfg.vocab_size:
                    out[b].append(int(nxt[b]))
                else:
                    done[b] = True
        if done.all():
            break
        seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return out


def teacher_forced_loss(model: InverterModel, pairs: Sequence[tuple[Sequence[int], np.ndarray]]) -> float:
    p = model.const()
    h, pad = _pad_states([h for _, h in pairs], model.cfg.max_seq_len)
    dec_in, tgt, w = _teacher_batch(model.cfg, [i for i, _ in pairs])
    return ad.cross_entropy(model.decode_logits(p, model.encode(p, h, pad), pad, dec_in), tgt, w).item()
