import json
import math
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from isinvert import metrics as M

FIXTURES = Path(__file__).parent / "fixtures"


def test_exact_match_cases():
    assert M.exact_match("x", "x") == 1
    assert M.exact_match("x", "x ") == 1
    assert M.exact_match("x", "y") == 0
    assert M.exact_match(b"ab\n", "ab") == 1


def test_token_f1_cases():
    assert M.token_f1([1, 2, 3], [1, 2, 3]) == 1.0
    assert M.token_f1([1, 2], [3, 4]) == 0.0
    assert M.token_f1([1, 2, 3, 4], [3, 4, 5, 6]) == pytest.approx(0.5)


@given(st.lists(st.integers(0, 5), max_size=12), st.lists(st.integers(0, 5), max_size=12))
def test_token_f1_symmetric_and_bounded(a, b):
    f = M.token_f1(a, b)
    assert 0.0 <= f <= 1.0
    assert f == pytest.approx(M.token_f1(b, a))


def test_bleu_cases():
    assert M.bleu("a b c d e", "a b c d e") == pytest.approx(1.0)
    assert M.bleu("", "a b c d") == 0.0


def test_bleu_matches_reference_fixtures():
    cases = json.loads((FIXTURES / "bleu_nltk.json").read_text())
    assert len(cases) == 20
    for c in cases:
        assert abs(M.bleu(c["candidate"], c["reference"]) - c["bleu"]) <= 1e-6


def test_rouge_cases():
    assert M.rouge_l("a b c", "a b c") == 1.0
    assert M.rouge_l("a b", "c d") == 0.0
    assert M.rouge_l("a c d", "a b c d") == pytest.approx(6 / 7)


def test_cos_proxy_cases():
    assert M.cos_sim_proxy("hello", "hello") == pytest.approx(1.0)
    assert M.cos_sim_proxy("abc", "xyz") == 0.0
    # "abab" has trigrams aba, bab; "abababab" has aba x3, bab x3: parallel vectors
    assert M.cos_sim_proxy("abab", "abababab") == pytest.approx(1.0)
    # "abcd" -> abc, bcd ; "abcdabcd" -> abc x2, bcd x2, cda, dab
    assert M.cos_sim_proxy("abcd", "abcdabcd") == pytest.approx(4 / (math.sqrt(2) * math.sqrt(10)))


@given(st.text(max_size=20), st.text(max_size=20))
def test_scores_in_unit_interval(a, b):
    for f in (M.bleu, M.rouge_l, M.cos_sim_proxy):
        assert 0.0 <= f(a, b) <= 1.0


def test_score_row_and_success(small_tok):
    row = M.score("patient has fever", "patient has fever", small_tok)
    assert row.em == 1 and row.f1 == 1.0 and row.success
    bad = M.score("zzz", "patient has fever", small_tok)
    assert bad.em == 0 and not bad.success
    assert row.scaled()["f1"] == 100.0


def test_metrics_config_validation():
    with pytest.raises(ValueError):
        M.MetricsConfig(tau_s=1.5)


def test_mean_sem():
    m, s = M.mean_sem([1.0, 2.0, 3.0])
    assert m == 2.0 and s == pytest.approx(1 / math.sqrt(3))
    assert M.mean_sem([4.0]) == (4.0, 0.0)
