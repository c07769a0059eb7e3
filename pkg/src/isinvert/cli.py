"""Command-line entry point: ``isinvert <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time

from . import experiment as ex
from .attacks import blackbox as bb
from .corpus import export_corpus, ingest_corpus, synthetic_corpus
from .defenses import DefenseConfig, apply_is_defense, defend_quantize
from .model import MicroLMConfig, TransformerWeights, capture_is, finetune_lm, heldout_loss, train_lm
from .wire import ISEntry, SplitServer, encode_frame, entries_to_records, export_is, import_is, split_client

log = logging.getLogger("isinvert")


def _texts(args) -> list[str]:
    if getattr(args, "corpus", None):
        texts, _ = ingest_corpus(args.corpus)
        return texts
    return synthetic_corpus(args.synthetic, seed=args.seed, mix=args.mix)


def _add_corpus(p, synthetic=2000):
    p.add_argument("--corpus", help="JSONL corpus with a 'text' field per line")
    p.add_argument("--synthetic", type=int, default=synthetic, help="synthetic sentences if no corpus")
    p.add_argument("--mix", type=float, default=0.5, help="fraction of code-style synthetic text")


def cmd_train_lm(args) -> int:
    texts = _texts(args)
    cfg = MicroLMConfig(vocab_size=args.vocab, d_model=args.d_model, n_layers=args.layers, n_heads=args.heads,
                        qkv_bias=args.qkv_bias, seed=args.seed)
    w = train_lm(texts, cfg, steps=args.steps, lr=args.lr, seed=args.seed)
    w.save(args.out)
    print(f"saved {args.out} fingerprint={w.fingerprint()} heldout={heldout_loss(w, texts[-200:]):.4f}")
    return 0


def cmd_finetune_lm(args) -> int:
    base = TransformerWeights.load(args.base)
    w = finetune_lm(base, _texts(args), steps=args.steps, lr=args.lr, seed=args.seed)
    w.save(args.out)
    print(f"saved {args.out} fingerprint={w.fingerprint()}")
    return 0


def cmd_capture_is(args) -> int:
    w = TransformerWeights.load(args.model)
    recs = capture_is(_texts(args), args.layer, w)
    export_is(recs, args.out, dtype=args.dtype)
    print(f"captured {len(recs)} records at layer {args.layer} -> {args.out}")
    return 0


def _experiment_config(args) -> ex.ExperimentConfig:
    attack_cfg = {k: v for k, v in dict(lr=args.lr, steps=args.steps, penalty=args.penalty, distance=args.distance,
                                        basis=args.basis, seed=args.seed, tol=args.tol).items() if v is not None}
    defense = {k: v for k, v in dict(kind=args.defense, p=args.p, sigma=args.sigma, epsilon=args.epsilon,
                                     clip=args.clip, bits=args.bits).items() if v is not None}
    overrides = dict(model=args.model, dataset=args.dataset, layer=args.layer, out_dir=args.out_dir,
                     seed=args.seed, is_path=args.is_path, attacker_model=args.attacker_model,
                     inverter=args.inverter, max_samples=args.max_samples, max_tokens=args.max_tokens,
                     workers=args.workers, attack_cfg=attack_cfg, defense=defense)
    if getattr(args, "kind", None):
        overrides["attack"] = args.kind
    if args.sweep_epsilon:
        overrides["sweep"] = {"epsilon": args.sweep_epsilon}
    if args.config:
        return ex.ExperimentConfig.from_toml(args.config, **overrides)
    missing = [k for k in ("model", "dataset", "layer") if overrides[k] is None]
    if missing:
        raise SystemExit(f"missing required options without --config: {', '.join(missing)}")
    return ex.ExperimentConfig.from_dict({}, **overrides)


def _print_summary(rows) -> None:
    for label, agg in ex.summarize(rows).items():
        parts = " ".join(f"{m}={agg[m]['mean']:.2f}±{agg[m]['sem']:.2f}" for m in ("cs", "bleu", "rouge", "em", "f1"))
        print(f"{label}: n={agg['n']} {parts} success={agg['success_rate']:.2f}")


def cmd_attack(args) -> int:
    try:
        cfg = _experiment_config(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ex.EXIT_FATAL
    code, rows = ex.run_experiment(cfg)
    _print_summary(rows)
    print(f"reports in {cfg.out_dir}")
    return code


def _pooled_from(path, texts, layer):
    return bb.pool_states(capture_is(texts, layer, TransformerWeights.load(path)))


def cmd_identify(args) -> int:
    texts = _texts(args)
    if args.train:
        pooled = {}
        for spec in args.train:
            label, _, path = spec.partition("=")
            pooled[label] = _pooled_from(path, texts, args.layer)
        det = bb.EnsembleDetector.fit(pooled, epochs=args.epochs, bottleneck=args.bottleneck, seed=args.seed)
        det.save(args.detector)
        print(f"saved detector {args.detector} labels={det.labels} thresholds={det.thresholds}")
        return 0
    det = bb.EnsembleDetector.load(args.detector)
    if args.probe_is:
        probe = bb.pool_states(entries_to_records(import_is(args.probe_is)))
    else:
        probe = _pooled_from(args.victim, texts, args.layer)
    print(bb.detect_model_type(probe, det, args.tau))
    return 0


def _pairs(path):
    return [(r.ids, r.states.h) for r in entries_to_records(import_is(path))]


def cmd_replicate(args) -> int:
    base = TransformerWeights.load(args.base)
    pairs = _pairs(args.pairs)
    report: list = []
    rep = bb.replicate_model(base, pairs, args.layer, steps=args.steps, lr=args.lr, seed=args.seed, report=report)
    rep.save(args.out)
    r = report[0]
    print(f"saved {args.out} is_mse {r.pre_loss:.6g} -> {r.best_eval:.6g}")
    return 0


def cmd_train_inverter(args) -> int:
    pairs = _pairs(args.pairs)
    layer = entries_to_records(import_is(args.pairs))[0].states.layer
    cfg = bb.InverterConfig(d_in=pairs[0][1].shape[1], d_enc=args.d_enc, vocab_size=args.vocab,
                            max_seq_len=args.max_seq_len, use_projection=not args.no_projection, seed=args.seed)
    model = bb.train_inverter(pairs, cfg, epochs=args.epochs, lr=args.lr, layer=layer, seed=args.seed)
    model.save(args.out)
    print(f"saved {args.out} loss {model.history[0]:.4f} -> {model.history[-1]:.4f}")
    return 0


def cmd_defend(args) -> int:
    d = DefenseConfig(kind=args.kind, p=args.p or 0.0, sigma=args.sigma or 0.0, epsilon=args.epsilon or 1.0,
                      clip=args.clip or 10.0, bits=args.bits or 8, seed=args.seed)
    if d.kind == "quantize":
        defend_quantize(TransformerWeights.load(args.input), d.bits).save(args.out)
    elif d.kind in ("dropout", "laplace_dp"):
        out = []
        for i, e in enumerate(import_is(args.input)):
            f = e.decode()
            h = apply_is_defense(f.h, dataclasses.replace(d, seed=d.seed + i))
            out.append(ISEntry(encode_frame(h, f.layer, f.dtype), e.meta))
        export_is(out, args.out)
    else:
        print("gaussian_embed acts inside the client forward pass; use it through `attack --defense`",
              file=sys.stderr)
        return ex.EXIT_FATAL
    print(f"wrote {args.out}")
    return 0


def cmd_serve(args) -> int:
    server = SplitServer(TransformerWeights.load(args.model), args.layer, curious=not args.honest,
                         store_path=args.store)
    host, port = server.start(args.host, args.port)
    print(f"serving on {host}:{port}", flush=True)
    try:
        if args.duration > 0:
            time.sleep(args.duration)
        else:
            while True:
                time.sleep(1.0)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def cmd_client(args) -> int:
    host, _, port = args.addr.rpartition(":")
    replies = split_client((host, int(port)), _texts(args), TransformerWeights.load(args.model), args.layer)
    for i, r in enumerate(replies):
        print(f"{i}\t{'ACK' if r.accepted else 'NACK'}\t{r.next_token}")
    return 0 if all(r.accepted for r in replies) else ex.EXIT_PARTIAL


def cmd_report(args) -> int:
    rows = ex.read_report_csv(args.input)
    by = {}
    for r in rows:
        by.setdefault(r["defense"], []).append(r)
    for label, rs in sorted(by.items()):
        cells = []
        for m in ("cs", "bleu", "rouge", "em", "f1"):
            mean, sem = ex.mean_sem([100.0 * float(r[m]) for r in rs])
            cells.append(f"{m}={mean:.2f}±{sem:.2f}")
        print(f"{label}\t{rs[0]['attack']}\tl={rs[0]['layer']}\tn={len(rs)}\t" + " ".join(cells))
    return 0


def cmd_export_corpus(args) -> int:
    export_corpus(_texts(args), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="isinvert", description="Internal-state inversion experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train-lm", help="train a micro-LM from scratch")
    _add_corpus(p)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--vocab", type=int, default=512)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--qkv-bias", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_train_lm)

    p = sub.add_parser("finetune-lm", help="continue training a model on a new corpus")
    _add_corpus(p)
    p.add_argument("--base", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_finetune_lm)

    p = sub.add_parser("capture-is", help="record internal states into an IS container")
    _add_corpus(p, synthetic=100)
    p.add_argument("--model", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f64")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_capture_is)

    p = sub.add_parser("attack", help="run an inversion experiment")
    p.add_argument("kind", choices=("ts", "er", "tbs", "transfer", "generate", "none"))
    p.add_argument("--config", help="TOML experiment config; flags override it")
    p.add_argument("--model")
    p.add_argument("--dataset")
    p.add_argument("--layer", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--is-path")
    p.add_argument("--attacker-model")
    p.add_argument("--inverter")
    p.add_argument("--max-samples", type=int)
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--penalty", type=float)
    p.add_argument("--distance", choices=("mse", "cos"))
    p.add_argument("--basis", choices=("singular", "unbiased"))
    p.add_argument("--tol", type=float)
    p.add_argument("--defense", choices=("none", "dropout", "gaussian_embed", "laplace_dp", "quantize"))
    p.add_argument("--p", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--clip", type=float)
    p.add_argument("--bits", type=int)
    p.add_argument("--sweep-epsilon", type=float, nargs="+")
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("identify", help="fit a model-type detector or label a victim")
    _add_corpus(p, synthetic=200)
    p.add_argument("--detector", required=True)
    p.add_argument("--train", nargs="+", metavar="LABEL=MODEL", help="fit and save a detector")
    p.add_argument("--victim", help="victim model to probe")
    p.add_argument("--probe-is", help="IS container captured on the probe set")
    p.add_argument("--layer", type=int, default=4)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--bottleneck", type=int, default=8)
    p.add_argument("--tau", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_identify)

    p = sub.add_parser("replicate", help="finetune a base model to reproduce observed states")
    p.add_argument("--base", required=True)
    p.add_argument("--pairs", required=True, help="IS container with ids in its metadata")
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_replicate)

    p = sub.add_parser("train-inverter", help="train the generative inverter")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--d-enc", type=int, default=128)
    p.add_argument("--vocab", type=int, default=512)
    p.add_argument("--max-seq-len", type=int, default=64)
    p.add_argument("--no-projection", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_train_inverter)

    p = sub.add_parser("defend", help="apply a defense to an IS container or a model")
    p.add_argument("kind", choices=("dropout", "laplace_dp", "quantize", "gaussian_embed"))
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--p", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--clip", type=float)
    p.add_argument("--bits", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_defend)

    p = sub.add_parser("serve", help="run the layers after the split point")
    p.add_argument("--model", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7450)
    p.add_argument("--store", help="write persisted frames here on shutdown")
    p.add_argument("--honest", action="store_true", help="do not persist frames")
    p.add_argument("--duration", type=float, default=0.0, help="seconds to serve (0 = until interrupted)")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("client", help="send prefix states to a split server")
    _add_corpus(p, synthetic=5)
    p.add_argument("--model", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--addr", default="127.0.0.1:7450")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_client)

    p = sub.add_parser("report", help="aggregate a report CSV")
    p.add_argument("input")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("export-corpus", help="write a synthetic corpus as JSONL")
    _add_corpus(p, synthetic=200)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_export_corpus)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
