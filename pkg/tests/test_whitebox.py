import math

import numpy as np
import pytest

from isinvert import autodiff as ad
from isinvert.attacks.whitebox import (AttackConfig, ZeroNormRowWarning, attack_er, attack_tbs, attack_ts,
                                       compute_basis, dm_penalty, inversion_loss, matching_loss, recover_tokens,
                                       run_attack)
from isinvert.autodiff import Tensor
from isinvert.model import MicroLMConfig, embed, init_weights, internal_states
from isinvert.optim import AdamWConfig, AdamWState, adamw_step
from isinvert.tokenizer import ByteBPETokenizer


# -- optimizer ---------------------------------------------------------

def test_adamw_zero_grad_no_change():
    x = np.array([1.0, -2.0])
    (y,) = adamw_step([x], [np.zeros(2)], AdamWState.zeros_like([x]), AdamWConfig(lr=0.1))
    np.testing.assert_array_equal(x, y)


def test_adamw_first_step_is_signed_lr(rng):
    x = rng.normal(size=20)
    g = rng.normal(size=20)
    (y,) = adamw_step([x], [g], AdamWState.zeros_like([x]), AdamWConfig(lr=1e-3))
    delta = y - x
    np.testing.assert_array_equal(np.sign(delta), -np.sign(g))
    assert np.all(np.abs(delta) <= 1e-3 * (1 + 1e-6))
    assert np.all(np.abs(delta) >= 1e-3 * 0.99)


def test_adamw_quadratic_monotone():
    x = np.array([1.0])
    state = AdamWState.zeros_like([x])
    prev = abs(x[0])
    for _ in range(100):
        (x,) = adamw_step([x], [2 * x], state, AdamWConfig(lr=1e-3))
        assert abs(x[0]) < prev
        prev = abs(x[0])


# -- losses ------------------------------------------------------------

def test_matching_loss_zero_at_truth(tiny_model):
    ids = [10, 40, 70, 100]
    h = internal_states(tiny_model, ids, 2)
    for dist in ("mse", "cos"):
        cfg = AttackConfig(distance=dist, penalty=0.5)
        loss = inversion_loss(embed(tiny_model, ids), h, tiny_model, 2, AttackConfig(distance=dist))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)
        assert np.isfinite(inversion_loss(embed(tiny_model, ids), h, tiny_model, 2, cfg).item())


def test_mse_matches_hand(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert matching_loss(Tensor(a), b).item() == pytest.approx(((a - b) ** 2).mean())


def test_penalty_zero_reduces_to_matching(tiny_model, rng):
    ids = [5, 6, 7]
    h = internal_states(tiny_model, ids, 1).h
    w = rng.normal(size=(3, 16))
    lhs = inversion_loss(w, h, tiny_model, 1, AttackConfig(penalty=0.0)).item()
    from isinvert.model import forward_prefix
    assert lhs == pytest.approx(matching_loss(forward_prefix(tiny_model, w, 1), h).item())


def test_dm_penalty_properties(rng):
    E = rng.normal(size=(40, 8))
    assert dm_penalty(E[:10], E[:10].copy(), batch=10, seed=0).item() < 1e-9
    perm = rng.permutation(10)
    # full-batch draw is order invariant
    a = dm_penalty(E[:10], E, batch=10, seed=3).item()
    b = dm_penalty(E[:10][perm], E, batch=10, seed=3).item()
    assert a == pytest.approx(b, rel=1e-12)
    wins = sum(dm_penalty(10 * E[:10], E, seed=s).item() > dm_penalty(E[:10], E, seed=s).item()
               for s in range(50))
    assert wins == 50


# -- basis & decoding ----------------------------------------------------

@pytest.mark.parametrize("kind", ["singular", "unbiased"])
def test_basis_orthonormal_and_complete(tiny_model, kind):
    E = tiny_model.embedding
    B = compute_basis(E, kind).B
    assert np.abs(B @ B.T - np.eye(B.shape[0])).max() < 1e-6
    assert np.abs((E @ B.T) @ B - E).max() < 1e-6


def test_recover_tokens_cases(rng):
    E = rng.normal(size=(20, 6))
    np.testing.assert_array_equal(recover_tokens(E[[5, 9]], E), [5, 9])
    np.testing.assert_array_equal(recover_tokens(2 * E[[5, 9]], E), [5, 9])
    with pytest.warns(ZeroNormRowWarning):
        assert recover_tokens(np.zeros((1, 6)), E)[0] == 0


def test_recover_tokens_tie_smallest_id():
    E = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert recover_tokens(np.array([[2.0, 0.0]]), E)[0] == 0


# -- attacks -------------------------------------------------------------

def test_er_init_at_truth_is_exact(tiny_model):
    ids = [30, 31, 99, 120]
    h = internal_states(tiny_model, ids, 2)
    r = attack_er(h, tiny_model, AttackConfig(steps=1), init=embed(tiny_model, ids))
    assert r.inverted_ids == ids
    assert r.loss_final == pytest.approx(0.0, abs=1e-12)


def test_best_checkpoint_not_worse_than_start(tiny_model):
    ids = [30, 31, 99]
    h = internal_states(tiny_model, ids, 2)
    for fn in (attack_ts, attack_er, attack_tbs):
        r = fn(h, tiny_model, AttackConfig(steps=20, lr=1e-2))
        assert r.trace.losses[r.trace.best_index] <= r.trace.losses[0]
        assert r.trace.best_index == int(np.argmin(r.trace.losses))


def test_tbs_entries_bounded(tiny_model):
    a = 5 / math.pi
    B = compute_basis(tiny_model.embedding).B
    z = np.random.default_rng(0).normal(size=(4, 16)) * 1e6
    w = a * np.arctan(z @ B)
    assert np.abs(w).max() < a * math.pi / 2
    assert a * math.pi / 2 == pytest.approx(2.5)


def test_search_space_ratio():
    cfg = MicroLMConfig()
    assert cfg.vocab_size / cfg.d_model == 8


def test_ts_toy_matches_brute_force():
    tok = ByteBPETokenizer()
    cfg = MicroLMConfig(vocab_size=256, d_model=8, n_layers=1, n_heads=2, max_seq_len=8, seed=4)
    w = init_weights(cfg, tok)
    # restrict to a two-token vocabulary by keeping only two embedding rows distinct
    E = np.zeros((256, 8))
    rng = np.random.default_rng(1)
    E[0], E[1] = rng.normal(size=8), rng.normal(size=8)
    E[2:] = E[0] * 100
    w2 = w.with_params({"tok_emb": E})
    small = type(w2)(MicroLMConfig(**{**cfg.__dict__, "vocab_size": 256}), w2.params, tok)
    target_id = 1
    h = internal_states(small, [target_id], 1)
    brute = min((0, 1), key=lambda t: ((internal_states(small, [t], 1).h - h.h) ** 2).sum())
    assert brute == target_id
    two = _two_token_model(small)
    r = attack_ts(internal_states(two, [target_id], 1), two, AttackConfig(steps=300, lr=5e-2))
    assert r.inverted_ids == [brute]


def _two_token_model(w):
    from isinvert.model import TransformerWeights
    p = dict(w.params)
    p["tok_emb"] = p["tok_emb"][:2]
    p["lm_head"] = p["lm_head"][:, :2]
    cfg = MicroLMConfig(**{**w.config.__dict__, "vocab_size": 2})
    return TransformerWeights(cfg, p, _TwoTok())


class _TwoTok(ByteBPETokenizer):
    @property
    def vocab_size(self):
        return 2


def test_joint_equals_separate(tiny_model):
    hs = [internal_states(tiny_model, ids, 2) for ids in ([1, 2, 3], [4, 5, 6])]
    cfg = AttackConfig(steps=15, lr=1e-2, penalty=0.0)
    joint = run_attack("er", hs, tiny_model, 2, cfg)
    for h, j in zip(hs, joint):
        s = run_attack("er", [h], tiny_model, 2, cfg)[0]
        np.testing.assert_allclose(j.trace.losses, s.trace.losses, rtol=1e-10)


def test_numeric_error_aborts(tiny_model):
    ids = [1, 2]
    h = internal_states(tiny_model, ids, 1).h.copy()
    h[0, 0] = np.nan
    r = attack_er(h, tiny_model, AttackConfig(steps=5), layer=1)
    assert r.trace.aborted


def test_layer_required_for_arrays(tiny_model):
    with pytest.raises(ValueError):
        attack_er(np.zeros((2, 16)), tiny_model, AttackConfig(steps=1))


@pytest.mark.parametrize("kw", [dict(lr=0), dict(steps=0), dict(distance="l1"), dict(basis="x"), dict(penalty=-1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        AttackConfig(**kw)
