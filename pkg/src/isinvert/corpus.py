"""Deterministic synthetic corpora: medical-style and code-style sentences."""

from __future__ import annotations

import json
import logging
import random
from pathlib import Path
from typing import Iterable

log = logging.getLogger(__name__)

_MED_TEMPLATES = [
    "I have had {symptom} for {duration} and it gets worse at {time}.",
    "My {relative} is {age} years old and complains of {symptom} after {activity}.",
    "Should I take {drug} for {symptom} or see a doctor first?",
    "The doctor said my {organ} test was {result}, what does that mean?",
    "Since {duration} I feel {feeling} and I cannot sleep at {time}.",
    "Is it safe to take {drug} with {drug2} if I have {condition}?",
    "I was diagnosed with {condition} and my {organ} hurts when I {activity}.",
    "After {activity} I get {symptom} and {symptom2} in my {bodypart}.",
    "My {bodypart} has been {feeling} for {duration}, should I worry?",
    "What dose of {drug} is normal for a {age} year old with {condition}?",
]

_MED_SLOTS = {
    "symptom": ["a headache", "chest pain", "a dry cough", "back pain", "a fever", "nausea",
                "dizziness", "a sore throat", "shortness of breath", "joint pain", "a rash",
                "stomach cramps", "blurred vision", "fatigue"],
    "symptom2": ["sweating", "a fast heartbeat", "chills", "numbness", "itching", "swelling"],
    "duration": ["two days", "a week", "three weeks", "a month", "six months", "a year",
                 "ten days", "two hours"],
    "time": ["night", "morning", "work", "lunch", "the weekend", "bedtime"],
    "relative": ["mother", "father", "son", "daughter", "wife", "husband", "grandmother", "brother"],
    "age": ["5", "12", "23", "35", "41", "58", "67", "72", "80"],
    "activity": ["running", "eating", "walking", "climbing stairs", "lifting boxes", "swimming",
                 "reading", "drinking coffee"],
    "drug": ["ibuprofen", "aspirin", "insulin", "metformin", "amoxicillin", "paracetamol",
             "lisinopril", "sertraline"],
    "drug2": ["alcohol", "antacids", "vitamin D", "melatonin", "warfarin", "caffeine"],
    "organ": ["liver", "kidney", "thyroid", "blood", "heart", "lung"],
    "result": ["high", "low", "normal", "borderline", "positive", "negative"],
    "feeling": ["tired", "anxious", "sore", "stiff", "weak", "numb", "sad"],
    "condition": ["diabetes", "asthma", "high blood pressure", "depression", "arthritis",
                  "migraines", "anemia"],
    "bodypart": ["knee", "neck", "shoulder", "lower back", "left arm", "right foot", "wrist"],
}

_CODE_TEMPLATES = [
    "Write a {lang} function that {task} using a {struct}.",
    "How do I {task} in {lang} without a {struct}?",
    "def {fname}({arg}): return {arg}.{method}()",
    "My {lang} code throws {error} when I {task}.",
    "Refactor this {lang} class so {fname} runs in {complexity} time.",
    "for {var} in range({num}): {fname}({var})",
    "Implement {algo} in {lang} and explain the {struct} it uses.",
    "Why does {fname} return {value} instead of a {struct} in {lang}?",
    "import {module}; {var} = {module}.{fname}({num})",
    "Optimize {algo} so that it handles {num} items with a {struct}.",
]

_CODE_SLOTS = {
    "lang": ["Python", "Rust", "Java", "C++", "Go", "JavaScript", "Haskell"],
    "task": ["sorts a list", "parses a JSON file", "reverses a string", "merges two arrays",
             "counts words", "finds duplicates", "reads a CSV file", "validates an email"],
    "struct": ["hash map", "linked list", "binary tree", "stack", "queue", "heap", "set", "vector"],
    "fname": ["parse_input", "get_value", "compute_sum", "load_data", "run_tests", "build_index",
              "flatten", "tokenize"],
    "arg": ["data", "items", "text", "node", "config", "path"],
    "method": ["strip", "lower", "split", "copy", "keys", "items", "sort"],
    "error": ["a KeyError", "a NullPointerException", "a segmentation fault", "an IndexError",
              "a TypeError", "a borrow checker error"],
    "complexity": ["linear", "constant", "logarithmic", "quadratic"],
    "var": ["i", "x", "idx", "row", "item", "key"],
    "num": ["10", "100", "256", "1000", "42", "8"],
    "algo": ["quicksort", "binary search", "Dijkstra", "merge sort", "BFS", "dynamic programming"],
    "value": ["None", "an integer", "zero", "an empty string", "a tuple"],
    "module": ["numpy", "json", "os", "re", "math", "random"],
}


def _fill(rng: random.Random, template: str, slots: dict[str, list[str]]) -> str:
    out = template
    for key, values in slots.items():
        token = "{" + key + "}"
        while token in out:
            out = out.replace(token, rng.choice(values), 1)
    return out


def medical_sentences(n: int, seed: int = 0) -> list[str]:
    rng = random.Random(f"medical-{seed}")
    return [_fill(rng, rng.choice(_MED_TEMPLATES), _MED_SLOTS) for _ in range(n)]


def code_sentences(n: int, seed: int = 0) -> list[str]:
    rng = random.Random(f"code-{seed}")
    return [_fill(rng, rng.choice(_CODE_TEMPLATES), _CODE_SLOTS) for _ in range(n)]


def synthetic_corpus(n: int, seed: int = 0, mix: float = 0.5) -> list[str]:
    """``n`` sentences, a fraction ``mix`` of them code-style, deterministically shuffled."""
    n_code = int(round(n * mix))
    texts = medical_sentences(n - n_code, seed) + code_sentences(n_code, seed)
    random.Random(f"shuffle-{seed}").shuffle(texts)
    return texts


def ingest_corpus(path: str | Path) -> tuple[list[str], int]:
    """Read a JSONL corpus; returns (texts, number of skipped malformed lines)."""
    texts: list[str] = []
    skipped = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                text = obj["text"]
                if not isinstance(text, str):
                    raise TypeError("text is not a string")
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                skipped += 1
                log.warning("skipping malformed line %d in %s: %s", lineno, path, exc)
                continue
            texts.append(text)
    return texts, skipped


def export_corpus(texts: Iterable[str], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in texts:
            fh.write(json.dumps({"text": t}, ensure_ascii=False) + "\n")
