"""Experiment configuration, orchestration and report writing.

A run takes a corpus, computes (optionally defended) internal states at one
layer, inverts them with the chosen attack and scores every sample. Reports
are a CSV with one row per (sample, condition) and a JSON summary with
means and standard errors.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .attacks import blackbox as bb
from .attacks.whitebox import AttackConfig, recover_tokens, run_attack
from .corpus import ingest_corpus
from .defenses import DefenseConfig, apply_is_defense, defend_gaussian_embed, defend_quantize
from .metrics import MetricsConfig, mean_sem, score
from .model import ConfigError, TransformerWeights, embed, forward_prefix
from .wire import entries_to_records, import_is

log = logging.getLogger(__name__)

EXIT_OK, EXIT_PARTIAL, EXIT_FATAL = 0, 1, 2
ATTACKS = ("none", "ts", "er", "tbs", "transfer", "generate")
REPORT_COLUMNS = ("sample_id", "attack", "defense", "layer", "cs", "bleu", "rouge", "em", "f1",
                  "wall_time", "loss_final")


@dataclass
class ReportRow:
    sample_id: int
    attack: str
    defense: str
    layer: int
    cs: float
    bleu: float
    rouge: float
    em: int
    f1: float
    wall_time: float | None
    loss_final: float
    success: bool = False
    inverted: str = ""
    error: str = ""


@dataclass
class ExperimentConfig:
    model: str
    dataset: str
    layer: int
    attack: str = "tbs"
    attack_cfg: AttackConfig = field(default_factory=AttackConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    tau_s: float = 0.9
    tau_tm: float = 0.9
    out_dir: str = "results"
    seed: int = 0
    is_path: str | None = None          # attack persisted ISs instead of capturing
    attacker_model: str | None = None   # replica/base for "transfer"
    inverter: str | None = None         # inverter checkpoint for "generate"
    max_samples: int | None = None
    max_tokens: int | None = None
    sweep: dict[str, list] = field(default_factory=dict)
    workers: int = 1
    record_timing: bool = False

    def __post_init__(self):
        # the run seed is the default for both stages unless they set their own
        if isinstance(self.attack_cfg, dict):
            self.attack_cfg = AttackConfig(**{"seed": self.seed, **self.attack_cfg})
        if isinstance(self.defense, dict):
            self.defense = DefenseConfig(**{"seed": self.seed, **self.defense})
        if self.attack not in ATTACKS:
            raise ConfigError(f"unknown attack {self.attack!r}")
        for key in self.sweep:
            if key not in {f.name for f in dataclasses.fields(DefenseConfig)} - {"kind"}:
                raise ConfigError(f"cannot sweep over {key!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def validate_paths(self) -> None:
        for name in ("model", "dataset", "is_path", "attacker_model", "inverter"):
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                raise ConfigError(f"{name} path does not exist: {p}")
        if self.attack == "transfer" and self.attacker_model is None:
            raise ConfigError("transfer attack needs attacker_model")
        if self.attack == "generate" and self.inverter is None:
            raise ConfigError("generate attack needs an inverter checkpoint")

    @classmethod
    def from_toml(cls, path: str | Path, **overrides) -> "ExperimentConfig":
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        return cls.from_dict(data, **overrides)

    @classmethod
    def from_dict(cls, data: dict, **overrides) -> "ExperimentConfig":
        data = {**data}
        data["attack_cfg"] = {**data.get("attack_cfg", {}), **overrides.pop("attack_cfg", {})}
        data["defense"] = {**data.get("defense", {}), **overrides.pop("defense", {})}
        data.update({k: v for k, v in overrides.items() if v is not None})
        if "betas" in data["attack_cfg"]:
            data["attack_cfg"]["betas"] = tuple(data["attack_cfg"]["betas"])
        return cls(**data)


def defense_label(d: DefenseConfig) -> str:
    if d.kind == "none":
        return "none"
    arg = {"dropout": f"p={d.p:g}", "gaussian_embed": f"sigma={d.sigma:g}",
           "laplace_dp": f"eps={d.epsilon:g},C={d.clip:g}", "quantize": f"bits={d.bits}"}[d.kind]
    return f"{d.kind}({arg})"


def defended_states(weights: TransformerWeights, ids: Sequence[int], layer: int, d: DefenseConfig,
                    sample_seed: int) -> np.ndarray:
    """Layer-``layer`` states as the client would release them under defense ``d``."""
    w = embed(weights, ids)
    if d.kind == "gaussian_embed":
        w = defend_gaussian_embed(w, d.sigma, d.seed + sample_seed)
    h = forward_prefix(weights, w, layer).data
    return apply_is_defense(h, dataclasses.replace(d, seed=d.seed + sample_seed))


def _samples(cfg: ExperimentConfig, weights: TransformerWeights):
    texts, skipped = ingest_corpus(cfg.dataset)
    if skipped:
        log.warning("%d malformed corpus lines skipped", skipped)
    tok = weights.tokenizer
    if cfg.is_path is not None:
        records = entries_to_records(import_is(cfg.is_path))
        if cfg.max_samples is not None:
            records = records[:cfg.max_samples]
        if len(records) > len(texts):
            raise ConfigError("IS container has more frames than the dataset has texts")
        out = []
        for i, r in enumerate(records):
            if r.states.layer != cfg.layer:
                raise ConfigError(f"frame {i} is from layer {r.states.layer}, expected {cfg.layer}")
            ids = tok.encode(texts[i])[:weights.config.max_seq_len]
            out.append((texts[i], ids, r.states.h))
        return out
    if cfg.max_samples is not None:
        texts = texts[:cfg.max_samples]
    out = []
    for t in texts:
        ids = tok.encode(t)[:cfg.max_tokens or weights.config.max_seq_len]
        out.append((tok.decode(ids), ids, None))
    return out


def _conditions(cfg: ExperimentConfig) -> list[DefenseConfig]:
    if not cfg.sweep:
        return [cfg.defense]
    keys = list(cfg.sweep)
    grids = np.array(np.meshgrid(*[np.arange(len(cfg.sweep[k])) for k in keys], indexing="ij")).reshape(len(keys), -1).T
    return [dataclasses.replace(cfg.defense, **{k: cfg.sweep[k][j] for k, j in zip(keys, idx)}) for idx in grids]


def _invert(cfg, weights, attacker, inverter, hs, ids_list):
    """Returns a list of (inverted text, loss_final, wall_time) per sample."""
    if cfg.attack == "none":
        E = weights.embedding
        return [(weights.tokenizer.decode(recover_tokens(embed(weights, ids), E)), 0.0, 0.0) for ids in ids_list]
    if cfg.attack == "generate":
        t0 = time.perf_counter()
        outs = bb.invert_generate_batch(hs, inverter)
        wall = (time.perf_counter() - t0) / max(1, len(hs))
        return [(weights.tokenizer.decode(o), float("nan"), wall) for o in outs]
    kind = "tbs" if cfg.attack == "transfer" else cfg.attack
    flags = {"black_box": True} if cfg.attack == "transfer" else None
    results = run_attack(kind, hs, attacker, cfg.layer, cfg.attack_cfg, flags=flags)
    return [(r.inverted_text, r.loss_final, r.wall_time) for r in results]


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> tuple[int, list[ReportRow]]:
    """Run every (sample, condition) pair; returns (exit code, rows) and writes reports."""
    try:
        cfg.validate_paths()
        weights = TransformerWeights.load(cfg.model)
        if not 0 <= cfg.layer <= weights.config.n_layers:
            raise ConfigError(f"layer {cfg.layer} outside 0..{weights.config.n_layers}")
        samples = _samples(cfg, weights)
        attacker = TransformerWeights.load(cfg.attacker_model) if cfg.attacker_model else None
        inverter = bb.InverterModel.load(cfg.inverter) if cfg.inverter else None
    except (OSError, ValueError, KeyError) as exc:
        log.error("fatal: %s", exc)
        if write:
            _write_reports(cfg, [], {"fatal": str(exc)})
        return EXIT_FATAL, []

    mcfg = MetricsConfig(cfg.tau_s, cfg.tau_tm)
    rows: list[ReportRow] = []
    for d in _conditions(cfg):
        label = defense_label(d)
        client = defend_quantize(weights, d.bits) if d.kind == "quantize" else weights
        victim_view = attacker if attacker is not None else client
        hs = [h if h is not None else defended_states(client, ids, cfg.layer, d, i)
              for i, (_, ids, h) in enumerate(samples)]
        chunks = _chunks(len(samples), cfg.workers)

        def work(idx):
            try:
                sub = _invert(cfg, client, victim_view, inverter, [hs[i] for i in idx],
                              [samples[i][1] for i in idx])
                return idx, sub, ""
            except Exception as exc:  # one failing chunk must not sink the report
                log.exception("chunk failed")
                return idx, None, f"{type(exc).__name__}: {exc}"

        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            outcomes = list(pool.map(work, chunks))
        for idx, sub, err in outcomes:
            for j, i in enumerate(idx):
                truth = samples[i][0]
                if sub is None:
                    rows.append(ReportRow(i, cfg.attack, label, cfg.layer, 0.0, 0.0, 0.0, 0, 0.0, None,
                                          float("nan"), error=err))
                    continue
                text, loss, wall = sub[j]
                s = score(text, truth, weights.tokenizer, mcfg)
                rows.append(ReportRow(i, cfg.attack, label, cfg.layer, s.cs, s.bleu, s.rouge, s.em, s.f1,
                                      wall, loss, s.success, text))
    rows.sort(key=lambda r: (r.defense, r.sample_id))
    code = EXIT_PARTIAL if any(r.error for r in rows) else EXIT_OK
    if write:
        _write_reports(cfg, rows)
    return code, rows


def _chunks(n: int, workers: int) -> list[list[int]]:
    if workers == 1:
        return [list(range(n))] if n else []
    size = max(1, -(-n // workers))
    return [list(range(i, min(n, i + size))) for i in range(0, n, size)]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 12))
    return str(v)


def report_csv(rows: Sequence[ReportRow], record_timing: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        d = dataclasses.asdict(r)
        if not record_timing:
            d["wall_time"] = None
        w.writerow([_fmt(d[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def summarize(rows: Sequence[ReportRow]) -> dict[str, Any]:
    """Per-condition means and SEMs of each score (×100), plus success rates."""
    out: dict[str, Any] = {}
    for label in sorted({r.defense for r in rows}):
        sel = [r for r in rows if r.defense == label and not r.error]
        agg = {}
        for m in ("cs", "bleu", "rouge", "em", "f1"):
            mean, sem = mean_sem([100.0 * getattr(r, m) for r in sel])
            agg[m] = {"mean": mean, "sem": sem}
        agg["success_rate"] = float(np.mean([r.success for r in sel])) if sel else float("nan")
        agg["n"] = len(sel)
        agg["errors"] = sum(1 for r in rows if r.defense == label and r.error)
        out[label] = agg
    return out


def _write_reports(cfg: ExperimentConfig, rows: Sequence[ReportRow], extra: dict | None = None) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report_csv(rows, cfg.record_timing))
    payload = {
        "config": dataclasses.asdict(cfg),
        "summary": summarize(rows),
        "rows": [{**dataclasses.asdict(r), "wall_time": r.wall_time if cfg.record_timing else None}
                 for r in rows],
        **(extra or {}),
    }
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))


def read_report_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
