"""Ranking metrics against brute-force definitional oracles."""

import math

import numpy as np
import pytest

from eegtf.metrics import Metrics, accuracy, evaluate_scores, is_defined, pr_auc, roc_auc


def roc_auc_bruteforce(scores, labels):
    """O(P*N) pairwise comparison: wins + half-ties over all pos/neg pairs."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        return math.nan
    wins = float((pos[:, None] > neg[None, :]).sum())
    ties = float((pos[:, None] == neg[None, :]).sum())
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def pr_auc_bruteforce(scores, labels):
    """Rank walk in pure Python: stable descending order, precision at positives."""
    n = len(scores)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    tp = 0
    terms = []
    for rank, i in enumerate(order, start=1):
        if labels[i] == 1:
            tp += 1
            terms.append(tp / rank)
    if tp == 0:
        return math.nan
    return math.fsum(terms) / tp


class TestRocAuc:
    def test_worked_example(self):
        assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_perfect_and_reversed(self):
        assert roc_auc([0.0, 0.0, 1.0, 1.0], [0, 0, 1, 1]) == 1.0
        assert roc_auc([1.0, 1.0, 0.0, 0.0], [0, 0, 1, 1]) == 0.0

    def test_single_tied_pair(self):
        assert roc_auc([0.5, 0.5], [0, 1]) == 0.5

    def test_all_scores_equal(self):
        assert roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_matches_bruteforce_exactly(self):
        rng = np.random.default_rng(0)
        for trial in range(300):
            n = int(rng.integers(2, 200))
            labels = rng.integers(0, 2, size=n)
            if rng.random() < 0.5:
                scores = rng.choice([0.1, 0.25, 0.5, 0.9], size=n)  # heavy ties
            else:
                scores = rng.random(n)
            got = roc_auc(scores, labels)
            want = roc_auc_bruteforce(scores, labels)
            if math.isnan(want):
                assert math.isnan(got)
            else:
                assert got == want

    def test_single_class_undefined(self):
        assert math.isnan(roc_auc([0.2, 0.4], [1, 1]))
        assert not is_defined(roc_auc([0.2, 0.4], [0, 0]))


class TestPrAuc:
    def test_perfect_ranking(self):
        assert pr_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_single_positive_at_rank_k(self):
        for k in (1, 2, 5, 9):
            scores = np.linspace(1.0, 0.1, 10)
            labels = np.zeros(10, dtype=int)
            labels[k - 1] = 1
            assert pr_auc(scores, labels) == 1.0 / k

    def test_all_tied_interleaved_equals_prevalence(self):
        # With evenly interleaved positives and stable tie order, every
        # positive sits at rank 1/p, 2/p, ... so AP collapses to prevalence p.
        labels = [0, 1, 0, 1, 0, 1, 0, 1]
        assert pr_auc([0.5] * 8, labels) == 0.5
        labels = [0, 0, 0, 1] * 5
        assert pr_auc([0.5] * 20, labels) == 0.25

    def test_matches_bruteforce_exactly(self):
        rng = np.random.default_rng(1)
        for trial in range(300):
            n = int(rng.integers(1, 200))
            labels = rng.integers(0, 2, size=n)
            if rng.random() < 0.5:
                scores = rng.choice([0.1, 0.5, 0.9], size=n)
            else:
                scores = rng.random(n)
            got = pr_auc(scores, labels)
            want = pr_auc_bruteforce(list(scores), list(labels))
            if math.isnan(want):
                assert math.isnan(got)
            else:
                assert got == want

    def test_no_positives_undefined(self):
        assert math.isnan(pr_auc([0.1, 0.2], [0, 0]))


class TestAccuracyAndBundle:
    def test_threshold_convention(self):
        assert accuracy([0.5, 0.49], [1, 0]) == 1.0

    def test_perfect_bundle(self):
        m = evaluate_scores([1.0, 1.0, 0.0], [1, 1, 0])
        assert (m.accuracy, m.roc_auc, m.pr_auc) == (1.0, 1.0, 1.0)

    def test_all_equal_scores_auc_half(self):
        m = evaluate_scores([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0])
        assert m.roc_auc == 0.5

    def test_report_lines_parse(self):
        m = Metrics(accuracy=0.875, roc_auc=0.9, pr_auc=float("nan"))
        for line in m.lines().strip().splitlines():
            name, value = line.split("\t")
            float(value)  # must parse, including nan

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            roc_auc([0.1, 0.2], [1])
