"""Membership scores, difficulty calibration and neighborhood information."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InputError
from .nn import PROB_FLOOR, MlpModel, embed, predict_proba

_CHUNK = 2048
SCORE_COLUMNS = ("sample_id", "y", "s_target", "s_ref", "ni", "s_cal_basic", "s_cal_enhanced", "is_member")


def membership_score(model: MlpModel, x, y):
    """Log-probability of the true class (clamped), for one sample or a batch."""
    probs = predict_proba(model, x)
    if probs.ndim == 1:
        y = int(y)
        if not 0 <= y < probs.shape[0]:
            raise InputError(f"class index {y} out of range")
        return math.log(max(probs[y], PROB_FLOOR))
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (probs.shape[0],) or y.min() < 0 or y.max() >= probs.shape[1]:
        raise InputError("labels do not match the batch")
    return np.log(np.maximum(probs[np.arange(len(y)), y], PROB_FLOOR))


def calibrated_score(h_score, g_score):
    return h_score - g_score


def enhanced_calibrated_score(h_score, g_score, ni):
    return (h_score - g_score) * ni


def _unit_rows(v: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.divide(v, norms, out=np.zeros_like(v), where=norms > 0)


def neighbor_counts(x_embeds, aux_embeds, theta: float = 0.0, exclude=None) -> np.ndarray:
    """Number of aux rows whose cosine similarity with each query exceeds ``theta``.

    ``exclude[i]``, when >= 0, is an aux row index that query ``i`` must not
    count (the query itself when it belongs to the aux set).
    """
    q = np.atleast_2d(np.asarray(x_embeds, dtype=np.float64))
    a = np.atleast_2d(np.asarray(aux_embeds, dtype=np.float64))
    if a.shape[0] == 0:
        raise InputError("auxiliary embedding set is empty")
    if q.shape[1] != a.shape[1]:
        raise InputError("query and aux embeddings have different widths")
    qn, an = _unit_rows(q), _unit_rows(a)
    counts = np.empty(q.shape[0], dtype=np.int64)
    for start in range(0, q.shape[0], _CHUNK):
        sims = qn[start : start + _CHUNK] @ an.T
        above = sims > theta
        if exclude is not None:
            ex = np.asarray(exclude[start : start + _CHUNK])
            rows = np.nonzero(ex >= 0)[0]
            above[rows, ex[rows]] = False
        counts[start : start + _CHUNK] = above.sum(axis=1)
    return counts


def ni_from_counts(counts) -> np.ndarray:
    counts = np.asarray(counts)
    return np.where(counts > 0, 1.0 / np.maximum(counts, 1), 1.0)


def neighborhood_info(x_embed, aux_embeds, theta: float = 0.0) -> float:
    """Reciprocal neighbor count of one embedding; 1.0 when it has no neighbors."""
    count = neighbor_counts(np.asarray(x_embed)[None, :], aux_embeds, theta)[0]
    return float(ni_from_counts(count))


class ScoreRecord(NamedTuple):
    sample_id: int
    y: int
    s_target: float
    s_ref: float
    ni: float
    s_cal_basic: float
    s_cal_enhanced: float
    is_member: bool | None


@dataclass(frozen=True)
class ScoreTable:
    """Column store of :class:`ScoreRecord` rows, ordered by ``sample_id``."""

    sample_id: np.ndarray
    y: np.ndarray
    s_target: np.ndarray
    s_ref: np.ndarray
    ni: np.ndarray
    s_cal_basic: np.ndarray
    s_cal_enhanced: np.ndarray
    is_member: np.ndarray | None = None

    def __len__(self):
        return len(self.sample_id)

    def __getitem__(self, i) -> ScoreRecord:
        member = None if self.is_member is None else bool(self.is_member[i])
        return ScoreRecord(
            int(self.sample_id[i]), int(self.y[i]), float(self.s_target[i]), float(self.s_ref[i]),
            float(self.ni[i]), float(self.s_cal_basic[i]), float(self.s_cal_enhanced[i]), member,
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def take(self, idx) -> "ScoreTable":
        idx = np.asarray(idx, dtype=np.int64)
        cols = {c: getattr(self, c)[idx] for c in SCORE_COLUMNS[:-1]}
        return ScoreTable(**cols, is_member=None if self.is_member is None else self.is_member[idx])

    @classmethod
    def concat(cls, tables) -> "ScoreTable":
        tables = list(tables)
        cols = {c: np.concatenate([getattr(t, c) for t in tables]) for c in SCORE_COLUMNS[:-1]}
        if any(t.is_member is None for t in tables):
            member = None
        else:
            member = np.concatenate([t.is_member for t in tables])
        order = np.argsort(cols["sample_id"], kind="stable")
        return cls(**cols, is_member=member).take(order)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SCORE_COLUMNS)
            for r in self:
                member = "" if r.is_member is None else int(r.is_member)
                w.writerow([r.sample_id, r.y, *(f"{v:.17g}" for v in r[2:7]), member])

    @classmethod
    def from_csv(cls, path) -> "ScoreTable":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        cols = {
            "sample_id": np.array([int(r["sample_id"]) for r in rows], dtype=np.int64),
            "y": np.array([int(r["y"]) for r in rows], dtype=np.int64),
        }
        for c in SCORE_COLUMNS[2:7]:
            cols[c] = np.array([float(r[c]) for r in rows])
        member = None
        if rows and rows[0]["is_member"] != "":
            member = np.array([r["is_member"] == "1" for r in rows])
        return cls(**cols, is_member=member)


def build_records(
    eval_model: MlpModel,
    ref_model: MlpModel,
    x,
    y,
    sample_ids,
    aux_embeds,
    aux_ids=None,
    theta: float = 0.0,
    is_member=None,
) -> ScoreTable:
    """Score samples under ``eval_model`` (shadow or target) calibrated by
    ``ref_model``.

    ``aux_embeds`` are reference-model embeddings of the attacker's shadow
    pool; when ``aux_ids`` is given, a sample whose id is in it does not count
    itself as a neighbor.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    sample_ids = np.asarray(sample_ids, dtype=np.int64)
    if not (len(x) == len(y) == len(sample_ids)):
        raise InputError("x, y and sample_ids lengths differ")
    s_target = membership_score(eval_model, x, y)
    s_ref = membership_score(ref_model, x, y)
    exclude = None
    if aux_ids is not None:
        pos = {int(a): i for i, a in enumerate(np.asarray(aux_ids))}
        exclude = np.array([pos.get(int(s), -1) for s in sample_ids], dtype=np.int64)
    counts = neighbor_counts(embed(ref_model, x), aux_embeds, theta, exclude)
    ni = ni_from_counts(counts)
    basic = calibrated_score(s_target, s_ref)
    enhanced = basic * ni
    member = None if is_member is None else np.broadcast_to(np.asarray(is_member, dtype=bool), (len(x),)).copy()
    table = ScoreTable(sample_ids, y, s_target, s_ref, ni, basic, enhanced, member)
    return table.take(np.argsort(sample_ids, kind="stable"))


class Hardness(str, enum.Enum):
    EASY_TO_PREDICT = "easy_to_predict"
    HARD_TO_PREDICT = "hard_to_predict"


def hardness_bucket(s_ref: float, binary_task: bool) -> Hardness:
    """Easy iff the reference score lies in (-5, 0] (binary) or (-10, 0]."""
    lo = -5.0 if binary_task else -10.0
    return Hardness.EASY_TO_PREDICT if lo < s_ref <= 0.0 else Hardness.HARD_TO_PREDICT


def categorize(table: ScoreTable, binary_task: bool, cal_threshold: float | None = None) -> list[str]:
    """Analysis labels such as ``easy_to_predict_member``.

    Non-members whose basic calibrated score exceeds ``cal_threshold``
    (default: median member calibrated score) are labelled
    ``hard_to_calibrate_nonmember``.
    """
    if table.is_member is None:
        raise InputError("categorize needs ground-truth membership")
    if cal_threshold is None:
        cal_threshold = float(np.median(table.s_cal_basic[table.is_member]))
    out = []
    for r in table:
        if not r.is_member and r.s_cal_basic > cal_threshold:
            out.append("hard_to_calibrate_nonmember")
            continue
        bucket = hardness_bucket(r.s_ref, binary_task).value
        out.append(f"{bucket}_{'member' if r.is_member else 'nonmember'}")
    return out
