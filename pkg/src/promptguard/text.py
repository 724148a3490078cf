"""Tokenization and bag-of-words helpers shared by the scorers."""

from __future__ import annotations

import math
import re
from collections import Counter
from importlib import resources
from pathlib import Path
from typing import Iterable

SCORE_FLOOR = 1e-6

_TOKEN = re.compile(r"\w+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def term_vector(text: str, stopwords: frozenset[str] | None = None) -> Counter[str]:
    tokens = tokenize(text)
    if stopwords:
        tokens = [t for t in tokens if t not in stopwords]
    return Counter(tokens)


def cosine(a: Counter[str], b: Counter[str]) -> float:
    if not a or not b:
        return 0.0
    if len(a) > len(b):
        a, b = b, a
    dot = sum(count * b[token] for token, count in a.items())
    if dot == 0:
        return 0.0
    # integer norms multiplied before the root: one rounding, so equal ratios stay equal
    norm = math.sqrt(sum(v * v for v in a.values()) * sum(v * v for v in b.values()))
    return min(1.0, dot / norm)


def tf_cosine(left: str, right: str) -> float:
    return cosine(term_vector(left), term_vector(right))


def neg_log_floor(score: float) -> float:
    return -math.log(max(score, SCORE_FLOOR))


def whole_word_pattern(term: str) -> re.Pattern[str]:
    """Case-insensitive match of ``term`` bounded by non-word characters."""
    words = term.strip().split()
    body = r"\s+".join(re.escape(w) for w in words)
    return re.compile(rf"(?<!\w){body}(?!\w)", re.IGNORECASE | re.UNICODE)


def count_whole_word(pattern: re.Pattern[str], text: str) -> int:
    return sum(1 for _ in pattern.finditer(text))


def single_line(text: str) -> str:
    return " ".join(text.split())


def load_stopwords(path: str | Path | None = None) -> frozenset[str]:
    if path is None:
        raw = resources.files("promptguard").joinpath("data/stopwords.txt").read_text(encoding="utf-8")
    else:
        raw = Path(path).read_text(encoding="utf-8")
    return frozenset(_clean_lines(raw.splitlines()))


def _clean_lines(lines: Iterable[str]) -> Iterable[str]:
    for line in lines:
        line = line.strip().lower()
        if line and not line.startswith("#"):
            yield line
