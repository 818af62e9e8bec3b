"""ROC / PR evaluation with emphasis on the low-FPR regime.

Curve points are indexed by tie groups of the score: the point with
threshold ``t`` is the operating point "predict member iff score >= t".
The first point has threshold ``+inf`` and sits at (0, 0).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import InputError

DEFAULT_FPR_TARGETS = (1e-4, 1e-3, 1e-2)
DEFAULT_RECALL_TARGETS = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
LOG_FLOOR = 1e-6


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).astype(bool).reshape(-1)
    if s.shape != y.shape:
        raise InputError("scores and labels differ in length")
    if not np.isfinite(s).all():
        raise InputError("scores must be finite")
    if y.all() or not y.any():
        raise InputError("both members and non-members are required")
    return s, y


def tie_counts(s, y):
    """Distinct thresholds (descending) with cumulative TP / FP counts."""
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    last_of_group = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    thr = np.r_[np.inf, s_sorted[last_of_group]]
    tp = np.r_[0, tp[last_of_group]].astype(np.int64)
    fp = np.r_[0, fp[last_of_group]].astype(np.int64)
    return thr, tp, fp


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    n_members: int
    n_nonmembers: int

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()))

    def point_above(self, tau: float) -> tuple[int, int]:
        """(TP, FP) of the rule "score > tau"."""
        k = int(np.searchsorted(-self.thresholds, -tau, side="left")) - 1
        return int(self.tp[k]), int(self.fp[k])


def roc_curve(scores, labels) -> RocCurve:
    s, y = _validate(scores, labels)
    thr, tp, fp = tie_counts(s, y)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    return RocCurve(thr, fp / n_neg, tp / n_pos, tp, fp, n_pos, n_neg)


def auc(roc: RocCurve) -> float:
    """Trapezoidal area, accumulated on exact integer counts."""
    dfp = np.diff(roc.fp)
    tsum = roc.tp[1:] + roc.tp[:-1]
    area = Fraction(int((dfp * tsum).sum()), 2 * roc.n_members * roc.n_nonmembers)
    return float(area)


def tpr_at_fpr(roc: RocCurve, fpr_target: float) -> float:
    """Largest TPR among curve points with FPR <= target (no interpolation)."""
    if not 0 < fpr_target < 1:
        raise InputError("fpr_target must lie in (0, 1)")
    ok = roc.fpr <= fpr_target
    return float(roc.tpr[ok].max())


@dataclass(frozen=True)
class PrCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.precision.tolist(), self.recall.tolist()))


def pr_curve(scores, labels) -> PrCurve:
    """Precision/recall per tie group; precision is 0 where nothing is
    predicted positive (the leading +inf point)."""
    s, y = _validate(scores, labels)
    thr, tp, fp = tie_counts(s, y)
    pred = tp + fp
    precision = np.divide(tp, pred, out=np.zeros(len(tp)), where=pred > 0)
    return PrCurve(thr, precision, tp / int(y.sum()))


def precision_at_recall(pr: PrCurve, recall_target: float) -> float:
    ok = pr.recall >= recall_target
    return float(pr.precision[ok].max()) if ok.any() else 0.0


def balanced_accuracy(scores, labels, threshold: float) -> float:
    """Mean of TPR and TNR for the rule "score > threshold"."""
    s, y = _validate(scores, labels)
    pred = s > threshold
    tpr = (pred & y).sum() / y.sum()
    tnr = (~pred & ~y).sum() / (~y).sum()
    return float((tpr + tnr) / 2)


def _fkey(v: float) -> str:
    return repr(float(v))


@dataclass
class MetricsReport:
    attack_name: str
    seed: int
    auc: float
    balanced_accuracy: float
    threshold: float
    tpr_at_fpr: dict[float, float]
    precision_at_recall: dict[float, float]
    roc: RocCurve = field(repr=False)
    pr: PrCurve = field(repr=False)

    def to_json(self, roc_file: str, pr_file: str) -> str:
        body = {
            "attack": self.attack_name,
            "seed": self.seed,
            "auc": self.auc,
            "balanced_accuracy": self.balanced_accuracy,
            "decision_threshold": self.threshold,
            "tpr_at_fpr": {_fkey(k): v for k, v in self.tpr_at_fpr.items()},
            "precision_at_recall": {_fkey(k): v for k, v in self.precision_at_recall.items()},
            "n_members": self.roc.n_members,
            "n_nonmembers": self.roc.n_nonmembers,
            "roc_file": roc_file,
            "pr_file": pr_file,
        }
        return json.dumps(body, indent=2, sort_keys=False) + "\n"

    def write(self, directory, stem: str) -> dict[str, str]:
        """Write ``<stem>.json``, ``<stem>_roc.csv``, ``<stem>_pr.csv`` and
        ``<stem>_roc_log.csv``; returns the file names."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        names = {
            "report": f"{stem}.json",
            "roc": f"{stem}_roc.csv",
            "pr": f"{stem}_pr.csv",
            "roc_log": f"{stem}_roc_log.csv",
        }
        write_points(d / names["roc"], ("threshold", "fpr", "tpr"), self.roc.points)
        write_points(d / names["pr"], ("threshold", "precision", "recall"), self.pr.points)
        write_points(d / names["roc_log"], ("threshold", "fpr", "tpr"), log_scale_points(self.roc))
        (d / names["report"]).write_text(self.to_json(names["roc"], names["pr"]))
        return names


def log_scale_points(roc: RocCurve, floor: float = LOG_FLOOR):
    return [(t, max(f, floor), max(r, floor)) for t, f, r in roc.points]


def write_points(path, header, points) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for p in points:
            w.writerow([f"{v:.17g}" for v in p])


def evaluate(
    attack_name: str,
    scores,
    labels,
    threshold: float,
    seed: int = 0,
    fpr_targets=DEFAULT_FPR_TARGETS,
    recall_targets=DEFAULT_RECALL_TARGETS,
) -> MetricsReport:
    roc = roc_curve(scores, labels)
    pr = pr_curve(scores, labels)
    return MetricsReport(
        attack_name=attack_name,
        seed=seed,
        auc=auc(roc),
        balanced_accuracy=balanced_accuracy(scores, labels, threshold),
        threshold=float(threshold),
        tpr_at_fpr={float(t): tpr_at_fpr(roc, t) for t in fpr_targets},
        precision_at_recall={float(r): precision_at_recall(pr, r) for r in recall_targets},
        roc=roc,
        pr=pr,
    )
