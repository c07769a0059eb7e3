"""End-to-end acceptance checks on the default micro-LM (d=64, L=8, vocab 512).

Each test prints one PASS/FAIL line; the lines are repeated in the terminal
summary. Trained models are cached in the pytest cache directory, keyed by a
recipe version, so repeated runs skip training. A cold run trains five base
or finetuned models and takes roughly 20 minutes on one CPU core.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from isinvert import autodiff as ad
from isinvert import experiment as ex
from isinvert.attacks import blackbox as bb
from isinvert.attacks.whitebox import AttackConfig, compute_basis, inversion_loss, recover_tokens, run_attack
from isinvert.corpus import code_sentences, export_corpus, medical_sentences, synthetic_corpus
from isinvert.defenses import defend_dropout, defend_laplace_dp, defend_quantize, laplace_noise
from isinvert.metrics import score, token_f1
from isinvert.model import (MicroLMConfig, TransformerWeights, capture_is, finetune_lm, forward_prefix,
                            internal_states, train_lm)
from isinvert.tokenizer import ByteBPETokenizer
from isinvert.wire import SplitServer, export_is, import_is, split_client

from conftest import ACCEPTANCE_LINES

RECIPE = "v1"
TRAIN_STEPS = 300


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


@dataclass
class Lab:
    root: object
    _mem: dict = field(default_factory=dict)

    def cached(self, name: str, build) -> TransformerWeights:
        if name in self._mem:
            return self._mem[name]
        path = self.root / f"{RECIPE}-{name}.mlmw"
        if path.exists():
            w = TransformerWeights.load(path)
        else:
            t0 = time.perf_counter()
            w = build()
            w.save(path)
            w = TransformerWeights.load(path)
            print(f"trained {name} in {time.perf_counter() - t0:.0f}s")
        self._mem[name] = w
        return w

    @property
    def corpus(self):
        return synthetic_corpus(2000, seed=0)

    @property
    def tokenizer(self):
        if "tok" not in self._mem:
            self._mem["tok"] = ByteBPETokenizer.train(self.corpus, 512)
        return self._mem["tok"]

    def base(self, seed: int = 0) -> TransformerWeights:
        return self.cached(f"base{seed}", lambda: train_lm(self.corpus, MicroLMConfig(seed=seed), steps=TRAIN_STEPS,
                                                           lr=3e-3, tokenizer=self.tokenizer, seed=seed))

    def variant(self, seed: int, k: int) -> TransformerWeights:
        # variant 0 specializes on medical text, variant 1 on code text
        texts = synthetic_corpus(600, seed=50 + k, mix=float(k))
        return self.cached(f"var{seed}-{k}", lambda: finetune_lm(self.base(seed), texts, steps=40, lr=1e-3,
                                                                 seed=100 + 10 * seed + k))


@pytest.fixture(scope="session")
def lab(request):
    return Lab(request.config.cache.mkdir("isinvert-models"))


def windows(tok, n: int, lo: int = 8, hi: int = 16, seed: int = 1) -> list[list[int]]:
    """``n`` random token windows of length in [lo, hi] from held-out synthetic text."""
    rng = np.random.default_rng(seed)
    out = []
    for text in synthetic_corpus(20 * n, seed=1000 + seed):
        ids = tok.encode(text)
        if len(ids) < hi:
            continue
        k = int(rng.integers(lo, hi + 1))
        s = int(rng.integers(0, len(ids) - k + 1))
        out.append(ids[s:s + k])
        if len(out) == n:
            return out
    raise RuntimeError("not enough held-out text")


def mean_scores(results, truths, tok):
    rows = [score(r.inverted_text, tok.decode(ids), tok) for r, ids in zip(results, truths)]
    return 100 * np.mean([r.em for r in rows]), 100 * np.mean([r.f1 for r in rows])


# -- 1 -----------------------------------------------------------------------

def test_c1_gradient_correctness(lab):
    w = lab.base()
    layer = 2
    worst = 0.0
    rng = np.random.default_rng(0)
    basis = compute_basis(w.embedding)
    for i, ids in enumerate(windows(w.tokenizer, 10, 6, 10, seed=2)):
        h = internal_states(w, ids, layer).h
        for kind, cfg in (("er", AttackConfig(penalty=0.1, distance="mse")),
                          ("tbs", AttackConfig(penalty=0.1, distance="cos"))):
            if kind == "er":
                x0 = w.embedding[ids] + rng.normal(0, 0.05, (len(ids), 64))

                def to_w(v):
                    return v
            else:
                x0 = rng.normal(0, 0.3, (len(ids), 64))

                def to_w(v):
                    return ad.scale(ad.arctan(v @ ad.Tensor(basis.B)), cfg.alpha)

            def f(v, cfg=cfg, to_w=to_w):
                # identical penalty draws on every evaluation
                return inversion_loss(to_w(v), h, w, layer, cfg, np.random.default_rng(7))

            err = ad.check_gradient(f, x0, h=1e-5, n_coords=20, rng=np.random.default_rng(i))
            worst = max(worst, err)
    ok = worst <= 1e-4
    report(1, ok, f"max rel err {worst:.2e} (<= 1e-4) over ER and TBS losses at l={layer}, 10 inputs x 20 coords")
    assert ok


# -- 2 -----------------------------------------------------------------------

def test_c2_shallow_exact_inversion(lab):
    w = lab.base()
    ids_list = windows(w.tokenizer, 50, 8, 16, seed=3)
    targets = [internal_states(w, ids, 1) for ids in ids_list]
    cfg = AttackConfig(lr=1e-2, steps=3000, tol=1e-6)
    results = run_attack("er", targets, w, 1, cfg)
    em, f1 = mean_scores(results, ids_list, w.tokenizer)
    steps = max(len(r.trace.losses) for r in results)
    ok = em >= 90 and f1 >= 95 and steps <= 50_000
    report(2, ok, f"ER l=1 on 50 inputs: EM {em:.1f}% (>= 90), F1 {f1:.1f} (>= 95), {steps} steps")
    assert ok


# -- 3 -----------------------------------------------------------------------

def test_c3_depth_contrast(lab):
    w = lab.base()
    ids_list = windows(w.tokenizer, 25, 8, 16, seed=4)
    targets = [internal_states(w, ids, 6) for ids in ids_list]
    cfg = AttackConfig(steps=1500)
    _, f1_ts = mean_scores(run_attack("ts", targets, w, 6, cfg), ids_list, w.tokenizer)
    _, f1_tbs = mean_scores(run_attack("tbs", targets, w, 6, cfg), ids_list, w.tokenizer)
    ok = f1_tbs - f1_ts >= 30 and f1_ts <= 10
    report(3, ok, f"l=6: TBS F1 {f1_tbs:.1f}, TS F1 {f1_ts:.1f} (gap >= 30, TS <= 10)")
    assert ok


# -- 4 -----------------------------------------------------------------------

def test_c4_gradient_explosion(lab):
    w = lab.base()
    ids_list = windows(w.tokenizer, 10, 8, 16, seed=5)
    targets = [internal_states(w, ids, 6) for ids in ids_list]
    cfg = AttackConfig(steps=100)
    er = np.concatenate([r.trace.grad_norms for r in run_attack("er", targets, w, 6, cfg)])
    tbs = np.concatenate([r.trace.grad_norms for r in run_attack("tbs", targets, w, 6, cfg)])
    ratio = float(np.median(er) / np.median(tbs))
    ok = ratio >= 10
    report(4, ok, f"median grad norm ER {np.median(er):.3g} / TBS {np.median(tbs):.3g} = {ratio:.1f}x (>= 10x)")
    assert ok


# -- 5 -----------------------------------------------------------------------

def test_c5_oracles(lab):
    E = lab.base().embedding
    rng = np.random.default_rng(6)
    agree = 0
    for _ in range(100):
        w_hat = rng.normal(size=(3, E.shape[1]))
        brute = []
        for row in w_hat:
            best, best_sim = -1, -math.inf
            for t in range(E.shape[0]):
                sim = float(row @ E[t]) / (np.linalg.norm(row) * np.linalg.norm(E[t]))
                if sim > best_sim:
                    best, best_sim = t, sim
            brute.append(best)
        agree += int(list(recover_tokens(w_hat, E)) == brute)
    ortho = max(float(np.abs(compute_basis(E, k).B @ compute_basis(E, k).B.T - np.eye(64)).max())
                for k in ("singular", "unbiased"))
    p_sing = float(np.abs(E @ compute_basis(E, "singular").B.T).max())
    p_unb = float(np.abs(E @ compute_basis(E, "unbiased").B.T).max())
    ok = agree == 100 and ortho <= 1e-6 and p_sing > p_unb
    report(5, ok, f"recover_tokens agreement {agree}/100, ||BB^T-I||max {ortho:.1e}, "
                  f"max|proj| singular {p_sing:.3f} > unbiased {p_unb:.3f}")
    assert ok


# -- 6 -----------------------------------------------------------------------

def rank_auc(pos, neg) -> float:
    """P(score_pos < score_neg) with ties counted half (lower RMSE means 'same family')."""
    pos, neg = np.asarray(pos)[:, None], np.asarray(neg)[None, :]
    return float(((pos < neg).sum() + 0.5 * (pos == neg).sum()) / (pos.size * neg.size))


def test_c6_model_type_identification(lab):
    layer = 4
    families = {f"F{s}": s for s in range(3)}
    probe = synthetic_corpus(400, seed=60)
    fit_texts, probe_texts = probe[:200], probe[200:]
    pooled = {label: bb.pool_states(capture_is(fit_texts, layer, lab.base(s))) for label, s in families.items()}
    det = bb.EnsembleDetector.fit(pooled, epochs=10, seed=0)
    # 10 probe sets of 20 texts per model
    sets = [probe_texts[i:i + 20] for i in range(0, 200, 20)]
    pos, neg, correct, total = [], [], 0, 0
    for label, s in families.items():
        for model, is_variant in [(lab.base(s), False), (lab.variant(s, 0), True), (lab.variant(s, 1), True)]:
            for texts in sets:
                x = bb.pool_states(capture_is(texts, layer, model))
                for ae_label, rmse in zip(det.labels, det.scores(x)):
                    (pos if ae_label == label else neg).append(rmse)
                if is_variant:
                    total += 1
                    correct += int(bb.detect_model_type(x, det) == label)
    auc = rank_auc(pos, neg)
    acc = 100 * correct / total
    ok = auc >= 0.95 and acc >= 90
    report(6, ok, f"3 families x (base + 2 finetunes): AUC {auc:.3f} (>= 0.95), variant labeling {acc:.1f}% (>= 90)")
    assert ok


# -- 7 -----------------------------------------------------------------------

def test_c7_replication_advantage(lab):
    layer = 2
    base = lab.base()
    victim = lab.variant(0, 1)
    adversary = synthetic_corpus(300, seed=70)
    pairs = [(r.ids, r.states.h) for r in capture_is(adversary[:250], layer, victim)]
    held = [(r.ids, r.states.h) for r in capture_is(adversary[250:], layer, victim)]
    replica = bb.replicate_model(base, pairs, layer, steps=150, lr=1e-3, eval_pairs=held, seed=0)
    ids_list = windows(base.tokenizer, 25, 8, 16, seed=7)
    targets = [internal_states(victim, ids, layer) for ids in ids_list]
    cfg = AttackConfig(lr=1e-2, steps=800)
    _, f1_rep = mean_scores(run_attack("tbs", targets, replica, layer, cfg), ids_list, base.tokenizer)
    _, f1_raw = mean_scores(run_attack("tbs", targets, base, layer, cfg), ids_list, base.tokenizer)
    ok = f1_rep > f1_raw
    report(7, ok, f"finetuned victim, l={layer}: replicated TBS F1 {f1_rep:.1f} > raw-base transfer F1 {f1_raw:.1f} "
                  f"(IS MSE {bb.is_mse(base, held, layer):.3g} -> {bb.is_mse(replica, held, layer):.3g})")
    assert ok


# -- 8 & 9 share one inverter -------------------------------------------------

@pytest.fixture(scope="module")
def inverter_setup(lab):
    layer = 4
    w = lab.base()
    train = capture_is(medical_sentences(2000, seed=101), layer, w)
    cfg = bb.InverterConfig(d_in=64, vocab_size=512, max_seq_len=48)
    model = bb.train_inverter([(r.ids, r.states.h) for r in train], cfg, epochs=3, lr=2e-3, layer=layer)
    return w, layer, model, train


def gen_f1(model, hs, ids_list) -> float:
    outs = bb.invert_generate_batch(hs, model)
    return 100 * float(np.mean([token_f1(o, ids[:model.cfg.max_seq_len]) for o, ids in zip(outs, ids_list)]))


def test_c8_generative_inversion(inverter_setup):
    w, layer, model, train = inverter_setup
    sub = train[:200]
    f1_train = gen_f1(model, [r.states.h for r in sub], [r.ids for r in sub])
    held = capture_is(medical_sentences(200, seed=202), layer, w)
    f1_in = gen_f1(model, [r.states.h for r in held], [r.ids for r in held])
    ood = capture_is(code_sentences(200, seed=303), layer, w)
    f1_ood = gen_f1(model, [r.states.h for r in ood], [r.ids for r in ood])
    ok = f1_in >= 60 and f1_train >= 80 and f1_ood < f1_in
    report(8, ok, f"inverter on 2k pairs: held-out F1 {f1_in:.1f} (>= 60), train F1 {f1_train:.1f} (>= 80), "
                  f"OOD F1 {f1_ood:.1f} (< in-dist)")
    assert ok


def test_c9_defense_sanity(inverter_setup):
    w, layer, model, _ = inverter_setup
    h = np.random.default_rng(9).normal(size=(16, 64))
    identity = np.array_equal(defend_dropout(h, 0.0, seed=1), h)
    eps, clip = 0.5, 2.0
    noise = laplace_noise((100_000,), 2 * clip / eps, seed=3)
    via_defense = defend_laplace_dp(np.zeros(100_000), eps, clip, seed=3)
    scale_err = abs(np.abs(via_defense).mean() / (2 * clip / eps) - 1)
    same = np.array_equal(noise, via_defense)

    held = capture_is(medical_sentences(200, seed=202), layer, w)
    ids_list = [r.ids for r in held]
    f1_full = gen_f1(model, [r.states.h for r in held], ids_list)
    q8 = defend_quantize(w, 8)
    f1_q8 = gen_f1(model, [forward_prefix(q8, q8.embedding[r.ids], layer).data for r in held], ids_list)
    C = 10.0
    f1_eps = [gen_f1(model, [defend_laplace_dp(r.states.h, e, C, seed=i) for i, r in enumerate(held)], ids_list)
              for e in (1e6, 1e4, 1e2)]
    monotone = all(b <= a + 1.0 for a, b in zip(f1_eps, f1_eps[1:]))
    # informational only: a much smaller budget shows the noise does bite at this clip
    f1_eps1 = gen_f1(model, [defend_laplace_dp(r.states.h, 1.0, C, seed=i) for i, r in enumerate(held)], ids_list)
    ok = identity and same and scale_err <= 0.03 and abs(f1_full - f1_q8) <= 2 and monotone
    report(9, ok, f"dropout p=0 identity {identity}; Laplace scale err {100 * scale_err:.2f}% (<= 3%); "
                  f"8-bit F1 {f1_q8:.1f} vs {f1_full:.1f} (|d| <= 2); eps 1e6/1e4/1e2 F1 "
                  + "/".join(f"{v:.1f}" for v in f1_eps) + f" (non-increasing); eps=1 F1 {f1_eps1:.1f}")
    assert ok


# -- 10 ----------------------------------------------------------------------

def test_c10_wire_transparency(lab, tmp_path):
    w = lab.base()
    layer = 1
    model_path = tmp_path / "m.mlmw"
    w.save(model_path)
    texts = [w.tokenizer.decode(ids) for ids in windows(w.tokenizer, 5, 6, 10, seed=10)]
    data = tmp_path / "data.jsonl"
    export_corpus(texts, data)

    server = SplitServer(w, layer, curious=True, store_path=tmp_path / "wire.isc")
    addr = server.start()
    try:
        replies = split_client(addr, texts, w, layer)
    finally:
        server.stop()
    export_is(capture_is(texts, layer, w), tmp_path / "offline.isc", dtype="f32")
    wire_frames = [e.frame for e in import_is(tmp_path / "wire.isc")]
    offline_frames = [e.frame for e in import_is(tmp_path / "offline.isc")]

    def run(is_path, out):
        cfg = ex.ExperimentConfig(str(model_path), str(data), layer, attack="tbs", is_path=str(is_path),
                                  attack_cfg={"steps": 300, "lr": 1e-2}, out_dir=str(tmp_path / out), seed=5)
        code, rows = ex.run_experiment(cfg)
        return code, (tmp_path / out / "report.csv").read_bytes()

    code_w, csv_w = run(tmp_path / "wire.isc", "wire")
    code_o, csv_o = run(tmp_path / "offline.isc", "offline")
    ok = all(r.accepted for r in replies) and wire_frames == offline_frames and csv_w == csv_o and code_w == code_o == 0
    report(10, ok, f"{len(texts)} texts over loopback: frames identical {wire_frames == offline_frames}, "
                   f"report CSV identical {csv_w == csv_o}")
    assert ok
