"""Scores for inverted text against the ground truth.

All scores live in [0, 1]; reports multiply by 100. The cosine score is a
character-trigram proxy, so its absolute values are not comparable with
embedding-model similarities, only its orderings are.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np


def _as_text(x) -> str:
    return x.decode("utf-8", errors="replace") if isinstance(x, (bytes, bytearray)) else str(x)


def exact_match(a, b) -> int:
    """1 iff identical after stripping trailing whitespace."""
    if isinstance(a, (bytes, bytearray)) or isinstance(b, (bytes, bytearray)):
        a = a if isinstance(a, (bytes, bytearray)) else str(a).encode("utf-8")
        b = b if isinstance(b, (bytes, bytearray)) else str(b).encode("utf-8")
        return int(bytes(a).rstrip() == bytes(b).rstrip())
    return int(a.rstrip() == b.rstrip())


def token_f1(a: Sequence, b: Sequence) -> float:
    """Multiset F1 between two token sequences (symmetric)."""
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    overlap = sum((Counter(a) & Counter(b)).values())
    if overlap == 0:
        return 0.0
    p = overlap / len(a)
    r = overlap / len(b)
    return 2 * p * r / (p + r)


def token_match_ratio(candidate: Sequence, reference: Sequence) -> float:
    """Fraction of reference tokens recovered (multiset intersection over reference length)."""
    if not reference:
        return 1.0
    return sum((Counter(candidate) & Counter(reference)).values()) / len(reference)


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate, reference, max_n: int = 4, epsilon: float = 0.1) -> float:
    """Sentence BLEU-4 with uniform weights, add-epsilon smoothing and brevity penalty.

    Strings are split on whitespace; token sequences are used as given.
    Zero-count precisions become ``epsilon / denominator``.
    """
    cand = candidate.split() if isinstance(candidate, str) else list(candidate)
    ref = reference.split() if isinstance(reference, str) else list(reference)
    if not cand:
        return 0.0
    nums, dens = [], []
    for n in range(1, max_n + 1):
        c, r = _ngrams(cand, n), _ngrams(ref, n)
        nums.append(sum(min(k, r[g]) for g, k in c.items()))
        dens.append(max(1, sum(c.values())))
    if nums[0] == 0:
        return 0.0
    c_len, r_len = len(cand), len(ref)
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    logs = [math.log((num if num else epsilon) / den) for num, den in zip(nums, dens)]
    return bp * math.exp(math.fsum(logs) / max_n)


def _lcs(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> float:
    """LCS-based F-measure over whitespace tokens (precision over the candidate)."""
    cand = candidate.split() if isinstance(candidate, str) else list(candidate)
    ref = reference.split() if isinstance(reference, str) else list(reference)
    if not cand and not ref:
        return 1.0
    if not cand or not ref:
        return 0.0
    lcs = _lcs(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return 2 * p * r / (p + r)


def _trigrams(text: str) -> Counter:
    if len(text) < 3:
        return Counter([text]) if text else Counter()
    return Counter(text[i:i + 3] for i in range(len(text) - 2))


def cos_sim_proxy(a, b) -> float:
    """Cosine between character-trigram count vectors; 1 for two empty texts."""
    ca, cb = _trigrams(_as_text(a)), _trigrams(_as_text(b))
    if not ca and not cb:
        return 1.0
    if not ca or not cb:
        return 0.0
    dot = sum(v * cb[k] for k, v in ca.items())
    na = math.sqrt(sum(v * v for v in ca.values()))
    nb = math.sqrt(sum(v * v for v in cb.values()))
    return min(1.0, max(0.0, dot / (na * nb)))


@dataclass
class MetricsConfig:
    tau_s: float = 0.9
    tau_tm: float = 0.9

    def __post_init__(self):
        if not (0 <= self.tau_s <= 1 and 0 <= self.tau_tm <= 1):
            raise ValueError("thresholds must lie in [0, 1]")


@dataclass
class ScoreRow:
    cs: float
    bleu: float
    rouge: float
    em: int
    f1: float
    success: bool

    def scaled(self) -> dict:
        """Scores ×100 as printed in reports (success stays boolean)."""
        d = asdict(self)
        return {k: (v if k == "success" else 100.0 * v) for k, v in d.items()}


def score(inverted: str, truth: str, tokenizer, cfg: MetricsConfig | None = None) -> ScoreRow:
    """All metrics for one sample; token F1 uses ``tokenizer.encode``."""
    cfg = cfg or MetricsConfig()
    inv_ids, ref_ids = tokenizer.encode(inverted), tokenizer.encode(truth)
    em = exact_match(inverted, truth)
    f1 = 1.0 if em else token_f1(inv_ids, ref_ids)
    cs = 1.0 if em else cos_sim_proxy(inverted, truth)
    bl = 1.0 if em else bleu(inverted, truth)
    rg = 1.0 if em else rouge_l(inverted, truth)
    success = cs >= cfg.tau_s and token_match_ratio(inv_ids, ref_ids) >= cfg.tau_tm
    return ScoreRow(cs, bl, rg, em, f1, bool(success))


def mean_sem(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    sem = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), sem
