import numpy as np
import pytest

from isinvert.attacks import blackbox as bb
from isinvert.attacks.whitebox import AttackConfig, attack_tbs
from isinvert.corpus import synthetic_corpus
from isinvert.model import ConfigError, MicroLMConfig, capture_is, finetune_lm, init_weights, internal_states


@pytest.fixture(scope="module")
def probe_texts():
    return synthetic_corpus(120, seed=11)


@pytest.fixture(scope="module")
def other_model(small_tok, tiny_cfg):
    return init_weights(MicroLMConfig(**{**tiny_cfg.__dict__, "seed": 99}), small_tok)


def pooled(model, texts, layer=1):
    return bb.pool_states(capture_is(texts, layer, model))


def test_autoencoder_learns(tiny_model, probe_texts):
    x = pooled(tiny_model, probe_texts)
    untrained = bb.train_autoencoder(x, epochs=0)
    trained = bb.train_autoencoder(x, epochs=40)
    assert trained.rmse(x) ** 2 <= 0.5 * untrained.rmse(x) ** 2
    assert trained.rmse(x) == trained.rmse(x.copy())
    assert trained.width == x.shape[1]


def test_autoencoder_separates_models(tiny_model, other_model, probe_texts):
    x = pooled(tiny_model, probe_texts[:80])
    ae = bb.train_autoencoder(x, epochs=40)
    same = ae.errors(pooled(tiny_model, probe_texts[80:]))
    diff = ae.errors(pooled(other_model, probe_texts[80:]))
    assert np.median(diff) - np.median(same) > 0


@pytest.fixture(scope="module")
def detector(tiny_model, other_model, probe_texts):
    return bb.EnsembleDetector.fit({"A": pooled(tiny_model, probe_texts), "B": pooled(other_model, probe_texts)},
                                   epochs=40)


def test_detect_closed_loop(detector, tiny_model, other_model, probe_texts):
    assert bb.detect_model_type(pooled(tiny_model, probe_texts[:30]), detector) == "A"
    assert bb.detect_model_type(pooled(other_model, probe_texts[:30]), detector) == "B"


def test_detect_tau_zero_and_order(detector, tiny_model, probe_texts):
    probe = pooled(tiny_model, probe_texts[:30])
    assert bb.detect_model_type(probe, detector, tau=0.0) == bb.INDEPENDENT
    perm = np.random.default_rng(0).permutation(len(probe))
    assert bb.detect_model_type(probe[perm], detector) == bb.detect_model_type(probe, detector)
    with pytest.raises(ValueError):
        bb.detect_model_type(np.zeros((0, 16)), detector)


def test_detector_round_trip(detector, tmp_path, tiny_model, probe_texts):
    detector.save(tmp_path / "d.aedt")
    back = bb.EnsembleDetector.load(tmp_path / "d.aedt")
    probe = pooled(tiny_model, probe_texts[:30])
    assert back.labels == detector.labels
    np.testing.assert_allclose(back.scores(probe), detector.scores(probe), rtol=1e-5)


def test_unique_labels():
    with pytest.raises(ValueError):
        bb.EnsembleDetector(["a", "a"], [], [])


def pairs_for(model, texts, layer):
    return [(r.ids, r.states.h) for r in capture_is(texts, layer, model)]


def test_replicate_identity_victim(tiny_model, probe_texts):
    pairs = pairs_for(tiny_model, probe_texts[:8], 1)
    rep = bb.replicate_model(tiny_model, pairs, 1, steps=3)
    assert bb.is_mse(tiny_model, pairs, 1) < 1e-20
    for k in tiny_model.params:
        np.testing.assert_allclose(rep.params[k], tiny_model.params[k], atol=1e-6)


def test_replicate_finetuned_victim(tiny_model, probe_texts):
    victim = finetune_lm(tiny_model, synthetic_corpus(200, seed=3, mix=1.0), steps=20, lr=3e-3,
                         batch_size=4, seq_len=32)
    train = pairs_for(victim, probe_texts[:60], 1)
    held = pairs_for(victim, probe_texts[60:90], 1)
    report = []
    rep = bb.replicate_model(tiny_model, train, 1, steps=60, lr=3e-3, eval_pairs=held, report=report)
    assert bb.is_mse(rep, held, 1) < 0.5 * bb.is_mse(tiny_model, held, 1)
    r = report[0]
    assert r.best_eval == min(r.eval_losses)


def test_replicate_errors(tiny_model):
    with pytest.raises(ConfigError):
        bb.replicate_model(tiny_model, [([1, 2], np.zeros((2, 8)))], 1)
    with pytest.raises(ConfigError):
        bb.replicate_model(tiny_model, [([1, 2], np.zeros((2, 16)))], 5)


def test_transfer_reduces_to_tbs(tiny_model):
    h = internal_states(tiny_model, [3, 40, 90], 2)
    cfg = AttackConfig(steps=20, lr=1e-2)
    a = bb.attack_transferred(h, tiny_model, cfg)
    b = attack_tbs(h, tiny_model, cfg)
    assert a.trace.losses == b.trace.losses
    assert a.flags["black_box"] and not b.flags


def test_inverter_memorizes_single_pair(tiny_model):
    ids = tiny_model.tokenizer.encode("patient reports mild fever")
    h = internal_states(tiny_model, ids, 1).h
    cfg = bb.InverterConfig(d_in=16, d_enc=32, vocab_size=tiny_model.config.vocab_size, max_seq_len=32)
    model = bb.train_inverter([(ids, h)], cfg, epochs=100, lr=3e-3)
    assert model.history[-1] < 0.5 * model.history[0]
    assert bb.invert_generate(h, model) == ids
    assert bb.invert_generate(h, model) == bb.invert_generate(h.copy(), model)


def test_inverter_truncates_and_bounds_vocab(tiny_model, rng):
    cfg = bb.InverterConfig(d_in=16, d_enc=32, vocab_size=tiny_model.config.vocab_size, max_seq_len=4)
    long = (list(range(10, 20)), rng.normal(size=(10, 16)))
    model = bb.train_inverter([long], cfg, epochs=2)
    out = bb.invert_generate_batch([rng.normal(size=(7, 16)) for _ in range(3)], model)
    assert all(0 <= t < cfg.vocab_size and len(o) <= 4 for o in out for t in o)


def test_inverter_projection_flag(tmp_path):
    with pytest.raises(ConfigError):
        bb.InverterConfig(d_in=16, d_enc=32, use_projection=False)
    cfg = bb.InverterConfig(d_in=32, d_enc=32, use_projection=False, vocab_size=50, max_seq_len=8)
    m = bb.InverterModel(cfg)
    assert "proj.w" not in m.params
    m.save(tmp_path / "i.ivrt")
    back = bb.InverterModel.load(tmp_path / "i.ivrt")
    assert back.cfg == cfg and set(back.params) == set(m.params)
