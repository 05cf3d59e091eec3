"""Metric oracles: brute-force pair counting for AUC, hand confusion tables."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvbody.errors import DegenerateError
from mvbody.metrics import (
    ConfusionCounts,
    aggregate_by_participant,
    auc_mannwhitney,
    confusion_metrics,
    full_report,
    report_from_counts,
)


def auc_bruteforce(scores, labels):
    """O(n^2) concordant/tied pair counting."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = scores[np.asarray(labels) == 1]
    neg = scores[np.asarray(labels) == 0]
    wins = sum(float(p > n) + 0.5 * float(p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


# ----------------------------------------------------------------- aggregate

def test_aggregate_single_scan():
    assert aggregate_by_participant([("a", 0.3)]) == [("a", 0.3)]


def test_aggregate_takes_max():
    out = aggregate_by_participant([("a", 0.2), ("a", 0.7), ("a", 0.4)])
    assert out == [("a", 0.7)]


def test_aggregate_matches_groupby_oracle():
    rng = np.random.default_rng(0)
    pairs = [(f"p{rng.integers(0, 20)}", float(rng.random())) for _ in range(200)]
    expected = {}
    for pid, s in pairs:
        expected[pid] = max(expected.get(pid, -1.0), s)
    assert aggregate_by_participant(pairs) == sorted(expected.items())


def test_aggregate_idempotent():
    rng = np.random.default_rng(1)
    pairs = [(f"p{rng.integers(0, 9)}", float(rng.random())) for _ in range(60)]
    once = aggregate_by_participant(pairs)
    assert aggregate_by_participant(once) == once


# ----------------------------------------------------------------- confusion

def test_confusion_paper_consistent_example():
    # 26-participant test set, 5 positives: TP=3 FP=2 TN=19 FN=2
    rep = report_from_counts(ConfusionCounts(tp=3, fp=2, tn=19, fn=2))
    assert round(rep.accuracy * 100, 2) == 84.62
    assert round(rep.precision * 100, 2) == 60.00
    assert round(rep.recall * 100, 2) == 60.00
    assert round(rep.specificity * 100, 2) == 90.48
    assert round(rep.f1, 3) == 0.600


def test_confusion_perfect_classifier():
    scores = np.array([0.9, 0.8, 0.1, 0.2])
    labels = np.array([1, 1, 0, 0])
    _, rep = confusion_metrics(scores, labels)
    assert (rep.accuracy, rep.precision, rep.recall, rep.specificity, rep.f1) == (1, 1, 1, 1, 1)


def test_confusion_constant_negative():
    labels = np.array([1] * 25 + [0] * 76)
    scores = np.zeros(101)
    _, rep = confusion_metrics(scores, labels)
    assert round(rep.accuracy * 100, 2) == 75.25
    assert rep.recall == 0.0
    assert rep.specificity == 1.0
    assert rep.precision_undefined and rep.precision == 0.0


def test_confusion_report_reproducible_from_counts():
    rng = np.random.default_rng(3)
    scores, labels = rng.random(50), rng.integers(0, 2, 50)
    counts, rep = confusion_metrics(scores, labels)
    rep2 = report_from_counts(counts)
    for f in ("accuracy", "precision", "recall", "specificity", "f1"):
        assert round(getattr(rep, f), 4) == round(getattr(rep2, f), 4)


# ----------------------------------------------------------------------- AUC

def test_auc_perfect_separation():
    auc, _ = auc_mannwhitney([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])
    assert auc == 1.0


def test_auc_all_tied():
    auc, p = auc_mannwhitney([0.5] * 10, [1, 0] * 5)
    assert auc == 0.5
    assert p == 1.0


def test_auc_single_class_degenerate():
    with pytest.raises(DegenerateError):
        auc_mannwhitney([0.1, 0.2], [1, 1])


def test_auc_matches_bruteforce_1000_random_instances():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        # discretized scores force plenty of ties
        scores = np.round(rng.random(n), 1)
        auc, p = auc_mannwhitney(scores, labels)
        assert auc == auc_bruteforce(scores, labels)
        assert 0.0 <= p <= 1.0


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(min_value=-5, max_value=5, allow_nan=False), min_size=4, max_size=30),
    st.data(),
)
def test_auc_invariant_under_monotone_transforms(scores, data):
    n = len(scores)
    labels = data.draw(st.lists(st.sampled_from([0, 1]), min_size=n, max_size=n))
    if sum(labels) in (0, n):
        labels[0] = 1 - labels[0]
    scores = np.round(np.asarray(scores), 3)  # keep exp() from collapsing near-ties
    base, _ = auc_mannwhitney(scores, labels)
    exp_auc, _ = auc_mannwhitney(np.exp(scores), labels)
    aff_auc, _ = auc_mannwhitney(3.5 * scores + 11.0, labels)
    assert base == exp_auc == aff_auc


def test_auc_exact_permutation_matches_enumeration():
    rng = np.random.default_rng(9)
    scores = np.round(rng.random(8), 1)
    labels = np.array([1, 1, 1, 0, 0, 0, 0, 0])
    auc, p = auc_mannwhitney(scores, labels, exact=True)
    # independent enumeration over label placements using the AUC itself
    import itertools

    obs = abs(auc_bruteforce(scores, labels) - 0.5)
    hits = total = 0
    for pos in itertools.combinations(range(8), 3):
        lab = np.zeros(8, dtype=int)
        lab[list(pos)] = 1
        hits += abs(auc_bruteforce(scores, lab) - 0.5) >= obs - 1e-12
        total += 1
    assert p == hits / total


def test_auc_exact_refuses_large_n():
    with pytest.raises(DegenerateError):
        auc_mannwhitney(np.arange(13.0), [0, 1] * 6 + [0], exact=True)


def test_full_report_combines():
    rng = np.random.default_rng(5)
    scores = rng.random(30)
    labels = (scores + rng.normal(0, 0.3, 30) > 0.5).astype(int)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    rep = full_report(scores, labels)
    assert 0 <= rep.auc <= 1 and 0 <= rep.p_value <= 1
    assert rep.n_pos + rep.n_neg == 30
