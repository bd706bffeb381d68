"""Confusion matrix and macro metrics against per-sample brute force."""

import numpy as np
import pytest

from roivit.errors import UsageError
from roivit.metrics import ConfusionMatrix, report


def brute_force_report(counts: np.ndarray):
    """Replay every (actual, predicted) pair and count TP/TN/FP/FN directly."""
    k = counts.shape[0]
    pairs = []
    for a in range(k):
        for p in range(k):
            pairs.extend([(a, p)] * int(counts[a, p]))
    total = len(pairs)
    out = {"precision": [], "recall": [], "f1": [], "ovr": []}
    correct = sum(1 for a, p in pairs if a == p)
    for c in range(k):
        tp = sum(1 for a, p in pairs if a == c and p == c)
        fp = sum(1 for a, p in pairs if a != c and p == c)
        fn = sum(1 for a, p in pairs if a == c and p != c)
        tn = total - tp - fp - fn
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out["precision"].append(prec)
        out["recall"].append(rec)
        out["f1"].append(f1)
        out["ovr"].append((tp + tn) / total)
    out["overall"] = correct / total
    return out


class TestAccumulate:
    def test_single_count(self):
        cm = ConfusionMatrix(2).accumulate(0, 0)
        assert cm.counts[0, 0] == 1 and cm.total == 1

    def test_total_grows_by_one(self):
        cm = ConfusionMatrix(3)
        rng = np.random.default_rng(0)
        for i in range(20):
            cm.accumulate(int(rng.integers(3)), int(rng.integers(3)))
            assert cm.total == i + 1

    def test_diagonal_pattern(self):
        cm = ConfusionMatrix(4)
        for c in range(4):
            cm.accumulate(c, c)
        np.testing.assert_array_equal(cm.counts, np.eye(4, dtype=np.int64))

    def test_out_of_range(self):
        with pytest.raises(UsageError):
            ConfusionMatrix(2).accumulate(0, 2)


class TestReport:
    def test_perfect_diagonal(self):
        cm = ConfusionMatrix(3, counts=np.diag([4, 2, 7]))
        rep = report(cm)
        assert rep.overall_accuracy == 1.0
        assert rep.macro_precision == rep.macro_recall == rep.macro_f1 == 1.0
        assert rep.macro_ovr_accuracy == 1.0

    def test_two_class_fixture(self):
        # 12 samples, counted by hand: class 0 has TP=5, FP=2, FN=1.
        cm = ConfusionMatrix(2, counts=np.array([[5, 1], [2, 4]]))
        rep = report(cm)
        assert abs(rep.per_class_precision[0] - 5 / 7) < 1e-4
        assert abs(rep.per_class_recall[0] - 5 / 6) < 1e-4
        assert abs(rep.per_class_f1[0] - 10 / 13) < 1e-4

    def test_absent_class_zero_rule(self):
        cm = ConfusionMatrix(3, counts=np.array([[3, 1, 0], [0, 2, 0], [0, 0, 0]]))
        rep = report(cm)
        assert rep.per_class_precision[2] == 0.0
        assert rep.per_class_recall[2] == 0.0
        assert rep.per_class_f1[2] == 0.0

    def test_empty_matrix_rejected(self):
        with pytest.raises(UsageError):
            report(ConfusionMatrix(2))

    def test_matches_brute_force_on_random_matrices(self):
        rng = np.random.default_rng(42)
        for _ in range(300):
            k = int(rng.integers(2, 21))
            counts = rng.integers(0, 20, size=(k, k))
            if counts.sum() == 0:
                counts[0, 0] = 1
            rep = report(ConfusionMatrix(k, counts=counts))
            oracle = brute_force_report(counts)
            assert rep.overall_accuracy == oracle["overall"]
            assert rep.per_class_precision == oracle["precision"]
            assert rep.per_class_recall == oracle["recall"]
            assert rep.per_class_f1 == pytest.approx(oracle["f1"], abs=1e-12)
            assert rep.macro_ovr_accuracy == pytest.approx(np.mean(oracle["ovr"]), abs=1e-12)

    def test_label_permutation_invariance(self):
        rng = np.random.default_rng(7)
        counts = rng.integers(0, 15, size=(6, 6))
        rep = report(ConfusionMatrix(6, counts=counts))
        perm = rng.permutation(6)
        permuted = counts[np.ix_(perm, perm)]
        rep2 = report(ConfusionMatrix(6, counts=permuted))
        for c in range(6):
            assert rep2.per_class_precision[c] == rep.per_class_precision[perm[c]]
            assert rep2.per_class_recall[c] == rep.per_class_recall[perm[c]]
        assert rep2.macro_f1 == pytest.approx(rep.macro_f1, abs=1e-12)
        assert rep2.overall_accuracy == rep.overall_accuracy

    def test_serializations(self):
        cm = ConfusionMatrix(2, counts=np.array([[5, 1], [2, 4]]))
        rep = report(cm)
        kv = rep.to_kv_text()
        assert "overall_accuracy = " in kv and "class1_f1 = " in kv
        table = rep.to_table(["ant", "bee"])
        assert "ant" in table and "macro" in table
