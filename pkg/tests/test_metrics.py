import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from drlm.metrics import (
    ConfusionCounts,
    accuracy,
    binomial_test,
    macro_f1,
    paired_outcomes,
    perplexity,
    read_predictions,
    write_predictions,
)


def test_uniform_model_perplexity_is_vocab_size():
    tokens = 37
    assert perplexity(tokens * math.log(1 / 10), tokens) == pytest.approx(10.0, rel=1e-12)


def test_perplexity_needs_tokens():
    with pytest.raises(ValueError):
        perplexity(-1.0, 0)


@given(st.floats(-20, 0), st.floats(-20, 0))
def test_perplexity_monotone(a, b):
    if a > b:
        assert perplexity(a, 1) < perplexity(b, 1)


def test_perplexity_segmentation_invariant():
    parts = [(-12.5, 4), (-30.25, 9), (-1.0, 1)]
    whole = perplexity(sum(p[0] for p in parts), sum(p[1] for p in parts))
    assert whole == pytest.approx(perplexity(-43.75, 14), rel=1e-15)


def test_published_reference_anchors_are_documentation_only():
    # Reported figures on licensed corpora; recorded, never recomputed.
    reported = {"rnnlm": 117.8, "dclm": 112.2, "drlm": 108.3}
    assert reported["drlm"] < reported["dclm"] < reported["rnnlm"]


def test_accuracy_basics():
    assert accuracy([1, 2, 0], [1, 2, 0]) == 1.0
    with pytest.raises(ValueError):
        accuracy([1, 2], [1])
    with pytest.raises(ValueError):
        accuracy([], [])


def test_random_accuracy_near_chance():
    rng = np.random.default_rng(0)
    gold, pred = rng.integers(0, 4, 10_000).tolist(), rng.integers(0, 4, 10_000).tolist()
    assert abs(accuracy(gold, pred) - 0.25) < 0.02


def test_accuracy_equals_confusion_trace():
    rng = np.random.default_rng(1)
    gold, pred = rng.integers(0, 3, 200), rng.integers(0, 3, 200)
    counts = ConfusionCounts.from_labels(gold, pred, 3)
    assert counts.total == 200
    assert counts.accuracy() == pytest.approx(accuracy(gold.tolist(), pred.tolist()))


def test_macro_f1_perfect():
    assert macro_f1(ConfusionCounts.from_labels([0, 1, 2, 1], [0, 1, 2, 1], 3)) == 1.0


def test_macro_f1_all_one_class():
    counts = ConfusionCounts.from_labels([0, 0, 1, 1], [0, 0, 0, 0], 2)
    assert macro_f1(counts) == pytest.approx(1 / 3, abs=1e-15)


def test_macro_f1_absent_class_counts_as_zero():
    counts = ConfusionCounts.from_labels([0, 1], [0, 1], 3)
    assert macro_f1(counts) == pytest.approx(2 / 3)
    assert macro_f1(counts, classes=[0, 1]) == 1.0


def test_macro_f1_needs_two_classes():
    with pytest.raises(ValueError):
        macro_f1(ConfusionCounts.from_labels([0], [0], 1))


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60))
def test_macro_f1_range(pairs):
    gold, pred = zip(*pairs)
    counts = ConfusionCounts.from_labels(gold, pred, 4)
    value = macro_f1(counts)
    assert 0.0 <= value <= 1.0
    diagonal = not (counts.matrix - np.diag(np.diag(counts.matrix))).any()
    assert (value == 1.0) == (diagonal and (np.diag(counts.matrix) > 0).all())


def test_binomial_sixty_of_hundred():
    exact = Fraction(sum(math.comb(100, k) for k in range(60, 101)), 2**100)
    assert binomial_test(60, 40, 100) == pytest.approx(float(exact), abs=1e-15)
    assert binomial_test(60, 40, 100) == pytest.approx(0.0284, abs=1e-4)


def test_binomial_symmetric_and_extreme():
    assert binomial_test(50, 50, 100) > 0.4
    assert binomial_test(10, 0, 10) == 2.0**-10


def test_binomial_ignores_ties_in_trials():
    assert binomial_test(10, 0, 500) == binomial_test(10, 0, 10)


def test_binomial_validation():
    with pytest.raises(ValueError):
        binomial_test(0, 0, 0)
    with pytest.raises(ValueError):
        binomial_test(8, 5, 10)


@given(st.integers(0, 40), st.integers(0, 40))
def test_binomial_monotone_in_wins(wins, losses):
    n = wins + losses + 1
    assert binomial_test(wins + 1, losses, n + 1) <= binomial_test(wins, losses + 1, n + 1)


def test_paired_outcomes():
    gold = [0, 1, 2, 1, 0]
    a = [0, 1, 0, 0, 0]
    b = [1, 1, 2, 0, 0]
    assert paired_outcomes(gold, a, b) == (1, 1, 5)


def test_prediction_file_round_trip(tmp_path):
    rows = [("d0", 0, "norel", "rel1"), ("d0", 1, "rel1", "rel1")]
    path = tmp_path / "p.tsv"
    write_predictions(rows, path)
    assert path.read_text().splitlines()[0] == "d0\t0\tnorel\trel1"
    assert read_predictions(path) == rows
    path.write_text("d0\t0\tnorel\n")
    with pytest.raises(ValueError):
        read_predictions(path)
