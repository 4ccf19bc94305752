"""Perplexity, accuracy, macro-F1 and the paired sign test."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np


def perplexity(log_likelihood: float, tokens: int) -> float:
    """exp(-LL / tokens) for a natural-log likelihood."""
    if tokens <= 0:
        raise ValueError("token count must be positive")
    return math.exp(-log_likelihood / tokens)


def accuracy(gold: Sequence[int], predicted: Sequence[int]) -> float:
    if len(gold) != len(predicted):
        raise ValueError(f"length mismatch: {len(gold)} gold vs {len(predicted)} predicted")
    if not gold:
        raise ValueError("no items to score")
    return sum(g == p for g, p in zip(gold, predicted)) / len(gold)


@dataclass
class ConfusionCounts:
    matrix: np.ndarray  # rows gold, columns predicted

    @classmethod
    def from_labels(cls, gold, predicted, Z: int) -> "ConfusionCounts":
        if len(gold) != len(predicted):
            raise ValueError(f"length mismatch: {len(gold)} gold vs {len(predicted)} predicted")
        m = np.zeros((Z, Z), dtype=np.int64)
        np.add.at(m, (np.asarray(gold, dtype=int), np.asarray(predicted, dtype=int)), 1)
        return cls(m)

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.matrix)) / self.total


def macro_f1(counts: ConfusionCounts, classes: Optional[Sequence[int]] = None) -> float:
    """Unweighted mean of per-class F1; a class with P + R = 0 scores 0 and
    still counts in the mean.

    ``classes`` restricts the mean (e.g. to leave out a dummy class that is
    not scored); predictions of an excluded class still count as misses.
    """
    m = counts.matrix
    if m.shape[0] < 2:
        raise ValueError("macro-F1 needs at least two classes")
    classes = range(m.shape[0]) if classes is None else list(classes)
    if not classes:
        raise ValueError("no classes to average over")
    scores = []
    for k in classes:
        tp = m[k, k]
        pred, gold = m[:, k].sum(), m[k, :].sum()
        precision = tp / pred if pred else 0.0
        recall = tp / gold if gold else 0.0
        denom = precision + recall
        scores.append(2 * precision * recall / denom if denom else 0.0)
    return float(np.mean(scores))


def paired_outcomes(gold, pred_a, pred_b) -> tuple[int, int, int]:
    """(items only A gets right, items only B gets right, total items)."""
    if not len(gold) == len(pred_a) == len(pred_b):
        raise ValueError("prediction lists differ in length")
    wins = sum(a == g != b for g, a, b in zip(gold, pred_a, pred_b))
    losses = sum(b == g != a for g, a, b in zip(gold, pred_a, pred_b))
    return wins, losses, len(gold)


def binomial_test(wins: int, losses: int, trials: int) -> float:
    """One-sided sign test: P(X >= wins) for X ~ Binomial(wins + losses, 1/2).

    Only the items where the systems disagree carry information, so ``trials``
    (all paired items) bounds the counts but does not enter the tail.
    Summed exactly in rationals.
    """
    if trials <= 0:
        raise ValueError("trials must be positive")
    if wins < 0 or losses < 0 or wins > trials or losses > trials or wins + losses > trials:
        raise ValueError(f"counts ({wins}, {losses}) inconsistent with {trials} trials")
    n = wins + losses
    if n == 0:
        return 1.0
    tail = sum(math.comb(n, k) for k in range(wins, n + 1))
    return float(Fraction(tail, 2**n))


# -- prediction files ---------------------------------------------------------------------


def write_predictions(rows, path) -> None:
    """One tab-separated line per slot: document id, slot, gold, predicted."""
    with open(path, "w", encoding="utf-8") as fh:
        for doc_id, slot, gold, pred in rows:
            fh.write(f"{doc_id}\t{slot}\t{gold}\t{pred}\n")


def read_predictions(path) -> list[tuple[str, int, str, str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
            rows.append((parts[0], int(parts[1]), parts[2], parts[3]))
    return rows
