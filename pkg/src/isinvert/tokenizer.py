"""Byte-level tokenizer with optional learned BPE merges.

Ids 0-255 are raw bytes, so every byte string encodes and decodes exactly.
Merges are learned inside whitespace-delimited chunks and never span them.
"""

from __future__ import annotations

import re
from collections import Counter
from typing import Iterable, Sequence

_CHUNK = re.compile(rb" ?[A-Za-z0-9]+| ?[^A-Za-z0-9\s]+|\s+")


def _chunks(data: bytes) -> list[bytes]:
    return _CHUNK.findall(data)


def _merge(ids: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    out = []
    i = 0
    n = len(ids)
    while i < n:
        if i < n - 1 and ids[i] == pair[0] and ids[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return out


class ByteBPETokenizer:
    def __init__(self, merges: Sequence[tuple[int, int]] = ()):
        self.merges: list[tuple[int, int]] = [tuple(map(int, m)) for m in merges]
        self._rank = {m: i for i, m in enumerate(self.merges)}
        self._bytes: list[bytes] = [bytes([i]) for i in range(256)]
        for a, b in self.merges:
            self._bytes.append(self._bytes[a] + self._bytes[b])
        self._cache: dict[bytes, list[int]] = {}

    @property
    def vocab_size(self) -> int:
        return 256 + len(self.merges)

    @classmethod
    def train(cls, texts: Iterable[str | bytes], vocab_size: int = 512) -> "ByteBPETokenizer":
        if vocab_size < 256:
            raise ValueError("vocab_size must be at least 256 (byte fallback)")
        words: Counter[tuple[int, ...]] = Counter()
        for t in texts:
            data = t.encode("utf-8") if isinstance(t, str) else t
            for c in _chunks(data):
                words[tuple(c)] += 1
        vocab = {w: list(w) for w in words}
        merges: list[tuple[int, int]] = []
        for new_id in range(256, vocab_size):
            pairs: Counter[tuple[int, int]] = Counter()
            for w, ids in vocab.items():
                f = words[w]
                for p in zip(ids, ids[1:]):
                    pairs[p] += f
            if not pairs:
                break
            # most frequent pair; ties go to the smallest pair for determinism
            best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
            merges.append(best)
            for w, ids in vocab.items():
                if len(ids) > 1:
                    vocab[w] = _merge(ids, best, new_id)
        return cls(merges)

    def _encode_chunk(self, chunk: bytes) -> list[int]:
        cached = self._cache.get(chunk)
        if cached is not None:
            return cached
        ids = list(chunk)
        while len(ids) > 1:
            ranked = [(self._rank.get(p, len(self.merges)), p) for p in zip(ids, ids[1:])]
            rank, pair = min(ranked)
            if rank == len(self.merges):
                break
            ids = _merge(ids, pair, 256 + rank)
        if len(self._cache) < 100_000:
            self._cache[chunk] = ids
        return ids

    def encode(self, text: str | bytes) -> list[int]:
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        out: list[int] = []
        for c in _chunks(data):
            out.extend(self._encode_chunk(c))
        return out

    def decode_bytes(self, ids: Iterable[int]) -> bytes:
        return b"".join(self._bytes[int(i)] for i in ids)

    def decode(self, ids: Iterable[int]) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    def token_bytes(self, i: int) -> bytes:
        return self._bytes[i]
