import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldcmia.errors import InputError
from ldcmia.metrics import (
    LOG_FLOOR,
    RocCurve,
    auc,
    balanced_accuracy,
    evaluate,
    pr_curve,
    precision_at_recall,
    roc_curve,
    tpr_at_fpr,
)


def mann_whitney(scores, labels):
    """O(n^2) pair count with half credit for ties, in exact arithmetic."""
    s = np.asarray(scores)
    y = np.asarray(labels, bool)
    wins = 0
    for m in s[y]:
        for n in s[~y]:
            wins += 2 if m > n else (1 if m == n else 0)
    return Fraction(wins, 2 * int(y.sum()) * int((~y).sum()))


def brute_confusion(scores, labels):
    """(threshold, TP, FP) for every "score >= t" rule over distinct scores."""
    s = np.asarray(scores)
    y = np.asarray(labels, bool)
    out = [(np.inf, 0, 0)]
    for t in sorted(set(s.tolist()), reverse=True):
        pred = s >= t
        out.append((t, int((pred & y).sum()), int((pred & ~y).sum())))
    return out


scored_sets = st.integers(2, 200).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(-20, 20).map(float), min_size=n, max_size=n),
        st.lists(st.booleans(), min_size=n, max_size=n).filter(lambda l: any(l) and not all(l)),
    )
)

MEMBERS = [2.0, 3.0]
NONMEMBERS = [1.0, 2.5]
TOY_S = MEMBERS + NONMEMBERS
TOY_Y = [1, 1, 0, 0]


class TestRoc:
    def test_hand_enumerated_points(self):
        roc = roc_curve(TOY_S, TOY_Y)
        assert roc.points == [
            (np.inf, 0.0, 0.0),
            (3.0, 0.0, 0.5),
            (2.5, 0.5, 0.5),
            (2.0, 0.5, 1.0),
            (1.0, 1.0, 1.0),
        ]

    def test_perfect_separation_hits_corner(self):
        roc = roc_curve([5, 6, 1, 2], [1, 1, 0, 0])
        assert (0.0, 1.0) in list(zip(roc.fpr.tolist(), roc.tpr.tolist()))
        assert auc(roc) == 1.0

    def test_all_tied(self):
        roc = roc_curve([1.0] * 6, [1, 0, 1, 0, 1, 0])
        assert roc.points == [(np.inf, 0.0, 0.0), (1.0, 1.0, 1.0)]
        assert auc(roc) == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(InputError):
            roc_curve([1, 2], [1, 1])
        with pytest.raises(InputError):
            pr_curve([1, 2], [0, 0])

    @settings(max_examples=100, deadline=None)
    @given(scored_sets)
    def test_invariants(self, data):
        s, y = data
        roc = roc_curve(s, y)
        assert np.all(np.diff(roc.thresholds) < 0)
        assert np.all(np.diff(roc.fpr) >= 0) and np.all(np.diff(roc.tpr) >= 0)
        assert (roc.fpr[0], roc.tpr[0]) == (0.0, 0.0)
        assert (roc.fpr[-1], roc.tpr[-1]) == (1.0, 1.0)
        assert len(roc.thresholds) == len(set(s)) + 1

    @settings(max_examples=100, deadline=None)
    @given(scored_sets)
    def test_matches_brute_confusion(self, data):
        s, y = data
        roc = roc_curve(s, y)
        got = list(zip(roc.thresholds.tolist(), roc.tp.tolist(), roc.fp.tolist()))
        assert got == brute_confusion(s, y)

    def test_point_above_is_strict(self):
        roc = roc_curve(TOY_S, TOY_Y)
        assert roc.point_above(2.5) == (1, 0)
        assert roc.point_above(2.4) == (1, 1)
        assert roc.point_above(10.0) == (0, 0)
        assert roc.point_above(0.0) == (2, 2)


class TestAuc:
    def test_toy_value(self):
        assert auc(roc_curve(TOY_S, TOY_Y)) == 0.75
        assert mann_whitney(TOY_S, TOY_Y) == Fraction(3, 4)

    @settings(max_examples=60, deadline=None)
    @given(scored_sets)
    def test_equals_mann_whitney(self, data):
        s, y = data
        assert abs(auc(roc_curve(s, y)) - float(mann_whitney(s, y))) <= 1e-9

    def test_mann_whitney_thousand_continuous(self):
        rng = np.random.default_rng(0)
        s = np.round(rng.normal(size=1000), 2)
        y = rng.random(1000) < 0.4
        y[:2] = [True, False]
        assert abs(auc(roc_curve(s, y)) - float(mann_whitney(s, y))) <= 1e-9

    def test_permuted_labels_near_half(self):
        rng = np.random.default_rng(1)
        s = rng.normal(size=10_000)
        y = rng.permutation(np.arange(10_000) % 2 == 0)
        assert abs(auc(roc_curve(s, y)) - 0.5) <= 0.02

    @settings(max_examples=50, deadline=None)
    @given(scored_sets, st.integers(-1000, 1000))
    def test_translation_invariance(self, data, shift):
        s, y = data
        a = roc_curve(s, y)
        b = roc_curve(np.asarray(s) + shift, y)
        assert np.array_equal(a.fpr, b.fpr) and np.array_equal(a.tpr, b.tpr)
        assert auc(a) == auc(b)
        assert tpr_at_fpr(a, 0.1) == tpr_at_fpr(b, 0.1)

    @settings(max_examples=50, deadline=None)
    @given(scored_sets)
    def test_monotone_transform_invariance(self, data):
        s, y = data
        a = roc_curve(s, y)
        b = roc_curve(np.tanh(np.asarray(s) / 25.0) * 7 + np.asarray(s) ** 3, y)
        assert np.array_equal(a.fpr, b.fpr) and np.array_equal(a.tpr, b.tpr)


class TestTprAtFpr:
    def test_exact_point(self):
        roc = RocCurve(
            np.array([np.inf, 1.0, 0.0]), np.array([0.0, 0.01, 1.0]), np.array([0.0, 0.6, 1.0]),
            np.array([0, 60, 100]), np.array([0, 1, 100]), 100, 100,
        )
        assert tpr_at_fpr(roc, 0.01) == 0.6

    def test_below_smallest_fpr_uses_zero_prefix(self):
        roc = roc_curve(TOY_S, TOY_Y)
        assert tpr_at_fpr(roc, 1e-4) == 0.5

    def test_random_vs_threshold_enumeration(self):
        rng = np.random.default_rng(2)
        s = rng.normal(size=300)
        y = rng.random(300) < 0.5
        roc = roc_curve(s, y)
        for target in (0.001, 0.01, 0.05, 0.2, 0.5):
            best = 0.0
            for t in np.r_[np.inf, s]:
                pred = s >= t
                if (pred & ~y).sum() / (~y).sum() <= target:
                    best = max(best, (pred & y).sum() / y.sum())
            assert tpr_at_fpr(roc, target) == best

    def test_target_range(self):
        with pytest.raises(InputError):
            tpr_at_fpr(roc_curve(TOY_S, TOY_Y), 0.0)


class TestPr:
    def test_perfect_classifier(self):
        pr = pr_curve([5, 6, 1, 2], [1, 1, 0, 0])
        for r in (0.2, 0.5, 1.0):
            assert precision_at_recall(pr, r) == 1.0

    def test_all_positive(self):
        pr = pr_curve([1.0] * 5, [1, 0, 0, 1, 0])
        assert pr.recall[-1] == 1.0 and pr.precision[-1] == pytest.approx(0.4)
        assert pr.precision[0] == 0.0

    def test_matches_brute_confusion(self):
        rng = np.random.default_rng(3)
        s = rng.integers(0, 30, 200).astype(float)
        y = rng.random(200) < 0.3
        pr = pr_curve(s, y)
        brute = brute_confusion(s, y)
        for (t, tp, fp), point in zip(brute, pr.points):
            prec = tp / (tp + fp) if tp + fp else 0.0
            assert point == (t, prec, tp / y.sum())

    @settings(max_examples=50, deadline=None)
    @given(scored_sets)
    def test_invariants(self, data):
        pr = pr_curve(*data)
        assert np.all(np.diff(pr.recall) >= 0)
        assert np.all((pr.precision >= 0) & (pr.precision <= 1))


class TestBalancedAccuracy:
    def test_all_correct(self):
        assert balanced_accuracy([3, 4, 0, 1], [1, 1, 0, 0], 2.0) == 1.0

    def test_all_member(self):
        assert balanced_accuracy([3, 4, 0, 1], [1, 1, 0, 0], -1.0) == 0.5

    def test_hand_confusion(self):
        # TP=3 FN=1 TN=2 FP=2
        s = [1, 1, 1, 0, 0, 0, 1, 1]
        y = [1, 1, 1, 1, 0, 0, 0, 0]
        assert balanced_accuracy(s, y, 0.5) == 0.625


class TestReport:
    def test_evaluate_and_write(self, tmp_path):
        rng = np.random.default_rng(4)
        y = np.arange(400) % 2 == 0
        s = rng.normal(size=400) + y
        rep = evaluate("demo", s, y, threshold=0.5, seed=7)
        assert set(rep.tpr_at_fpr) == {1e-4, 1e-3, 1e-2}
        assert all(0 <= v <= 1 for v in (rep.auc, rep.balanced_accuracy, *rep.tpr_at_fpr.values()))
        names = rep.write(tmp_path, "demo")
        body = json.loads((tmp_path / names["report"]).read_text())
        assert body["auc"] == rep.auc and body["seed"] == 7
        assert body["tpr_at_fpr"]["0.01"] == rep.tpr_at_fpr[0.01]
        log_rows = (tmp_path / names["roc_log"]).read_text().splitlines()[1:]
        assert all(float(r.split(",")[1]) >= LOG_FLOOR for r in log_rows)
        raw_rows = (tmp_path / names["roc"]).read_text().splitlines()[1:]
        assert float(raw_rows[0].split(",")[1]) == 0.0
