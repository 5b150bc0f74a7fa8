"""Answer metrics: exact match, token F1, ROUGE-L, and score aggregation.

Normalization is the standard QA recipe (lowercase, strip punctuation, drop
articles, collapse whitespace); EM and F1 operate on the resulting token
lists, ROUGE-L is the F-measure over their longest common subsequence. All
metric values lie in [0, 1].
"""
from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass

import numpy as np

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> list[str]:
    """Lowercase, strip punctuation, drop articles, split on whitespace."""
    text = text.lower().translate(_PUNCT_TABLE)
    text = _ARTICLES.sub(" ", text)
    return text.split()


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split; keeps articles (used by ROUGE-L)."""
    return text.lower().translate(_PUNCT_TABLE).split()


def exact_match(pred: str, gold: str) -> int:
    return int(normalize_answer(pred) == normalize_answer(gold))


def _f_measure(overlap: float, pred_len: int, gold_len: int) -> float:
    if pred_len == 0 and gold_len == 0:
        return 1.0
    if pred_len == 0 or gold_len == 0 or overlap == 0:
        return 0.0
    precision = overlap / pred_len
    recall = overlap / gold_len
    return 2 * precision * recall / (precision + recall)


def token_f1(pred: str, gold: str) -> float:
    """Harmonic mean of token-multiset precision and recall."""
    pred_tokens = normalize_answer(pred)
    gold_tokens = normalize_answer(gold)
    overlap = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    return _f_measure(overlap, len(pred_tokens), len(gold_tokens))


def lcs_length(a: list[str], b: list[str]) -> int:
    """Longest common subsequence length via the classic DP table."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        curr = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                curr.append(prev[j - 1] + 1)
            else:
                curr.append(max(prev[j], curr[j - 1]))
        prev = curr
    return prev[len(b)]


def rouge_l(pred: str, gold: str) -> float:
    """F-measure over the longest common subsequence of tokens.

    Tokenization keeps articles so that word order over the full answer is
    what the score reflects; EM and F1 drop articles per the QA convention.
    """
    pred_tokens = tokenize(pred)
    gold_tokens = tokenize(gold)
    overlap = lcs_length(pred_tokens, gold_tokens)
    return _f_measure(overlap, len(pred_tokens), len(gold_tokens))


@dataclass(frozen=True)
class Aggregate:
    mean: float
    std: float
    ci_low: float
    ci_high: float
    n: int


class EmptyInput(Exception):
    """Aggregation requires at least one value."""


def aggregate(values: list[float], bootstrap_samples: int = 10_000, seed: int = 0) -> Aggregate:
    """Mean, sample std, and a seeded percentile-bootstrap 95% interval."""
    if not values:
        raise EmptyInput("no values to aggregate")
    arr = np.asarray(values, dtype=float)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    rng = np.random.default_rng(seed)
    indices = rng.integers(0, arr.size, size=(bootstrap_samples, arr.size))
    means = arr[indices].mean(axis=1)
    ci_low, ci_high = np.percentile(means, [2.5, 97.5])
    return Aggregate(mean=mean, std=std, ci_low=float(ci_low), ci_high=float(ci_high), n=arr.size)


@dataclass(frozen=True)
class InstanceScore:
    query_id: str
    trial: int
    metric: str
    value: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"metric value {self.value} outside [0, 1]")


@dataclass(frozen=True)
class ScoreReport:
    """Per-instance metric values plus one aggregate per metric name."""

    per_instance: tuple[InstanceScore, ...]
    aggregates: dict[str, Aggregate]

    @classmethod
    def build(
        cls, scores: list[InstanceScore], bootstrap_samples: int = 10_000, seed: int = 0
    ) -> "ScoreReport":
        by_metric: dict[str, list[float]] = {}
        for s in scores:
            by_metric.setdefault(s.metric, []).append(s.value)
        aggregates = {
            metric: aggregate(vals, bootstrap_samples=bootstrap_samples, seed=seed)
            for metric, vals in sorted(by_metric.items())
        }
        return cls(per_instance=tuple(scores), aggregates=aggregates)
