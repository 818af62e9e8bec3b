"""Membership inference attacks.  Every attack returns higher scores for
samples it believes are members."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from .errors import InputError
from .metrics import tie_counts
from .nn import MlpConfig, MlpModel, TrainConfig, predict_proba, train
from .scores import ScoreTable

FEATURE_GROUPS = ("s_target", "s_cal", "label")
DROP_CHOICES = {"drop_s_target": "s_target", "drop_s_cal": "s_cal", "drop_label": "label"}
DEFAULT_HIDDEN = (64, 32)
SALEM_TOP_K = 3


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class AttackOutput:
    attack_name: str
    sample_ids: np.ndarray
    scores: np.ndarray
    ground_truth: np.ndarray | None = None
    threshold: float = 0.0
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != self.sample_ids.shape:
            raise InputError("scores and sample_ids lengths differ")
        if self.ground_truth is not None:
            self.ground_truth = np.asarray(self.ground_truth, dtype=bool)
            if self.ground_truth.shape != self.scores.shape:
                raise InputError("ground_truth length differs from scores")
        if not np.isfinite(self.scores).all():
            raise InputError(f"{self.attack_name} produced non-finite scores")

    @property
    def digest(self) -> str:
        return config_digest({"attack": self.attack_name, **self.config})

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("sample_id,score,is_member\n")
            gt = self.ground_truth
            for i, (sid, s) in enumerate(zip(self.sample_ids.tolist(), self.scores.tolist())):
                member = "" if gt is None else str(int(gt[i]))
                fh.write(f"{sid},{s:.17g},{member}\n")

    def sidecar(self) -> str:
        body = {
            "attack": self.attack_name,
            "config_digest": self.digest,
            "decision_threshold": self.threshold,
            "config": self.config,
        }
        return json.dumps(body, indent=2, sort_keys=True, default=str) + "\n"


def best_balanced_threshold(scores, labels) -> float:
    """Threshold for "score > t" that maximizes balanced accuracy on a labelled
    (attacker-side) sample; ties go to the larger threshold."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    thr, tp, fp = tie_counts(s, y)
    bal = (tp / y.sum() + 1.0 - fp / (~y).sum()) / 2
    k = int(np.argmax(bal))
    if k == 0:
        return float(thr[1])
    if k == len(thr) - 1:
        return float(thr[k] - 1.0)
    return float((thr[k] + thr[k + 1]) / 2)


def yeom_attack(records: ScoreTable, threshold: float = 0.0) -> AttackOutput:
    return AttackOutput("yeom", records.sample_id, records.s_target.copy(), records.is_member, threshold)


def watson_attack(records: ScoreTable, threshold: float = 0.0) -> AttackOutput:
    return AttackOutput("watson", records.sample_id, records.s_cal_basic.copy(), records.is_member, threshold)


@dataclass
class BinaryClassifier:
    """MLP on z-scored features whose second softmax unit means "member"."""

    model: MlpModel
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features, is_member, hidden, train_config: TrainConfig, seed: int) -> "BinaryClassifier":
        f = np.asarray(features, dtype=np.float64)
        y = np.asarray(is_member, dtype=bool)
        if y.all() or not y.any():
            raise InputError("attack classifier needs both member and non-member examples")
        mean = f.mean(axis=0)
        std = np.maximum(f.std(axis=0), 1e-9)
        model = MlpModel.init(MlpConfig((f.shape[1], *hidden, 2), seed=seed))
        model, _ = train(model, (f - mean) / std, y.astype(np.int64), train_config)
        return cls(model, mean, std)

    @property
    def n_features(self) -> int:
        return self.model.n_inputs

    def member_probability(self, features) -> np.ndarray:
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != self.n_features:
            raise InputError(f"expected {self.n_features} features, got shape {f.shape}")
        return predict_proba(self.model, (f - self.mean) / self.std)[:, 1]


def salem_features(probs) -> np.ndarray:
    """Top-3 posteriors in descending order, zero-padded for < 3 classes."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    top = -np.sort(-p, axis=1)[:, :SALEM_TOP_K]
    if top.shape[1] < SALEM_TOP_K:
        top = np.hstack([top, np.zeros((top.shape[0], SALEM_TOP_K - top.shape[1]))])
    return top


def salem_train(
    shadow_model: MlpModel,
    x_in,
    x_out,
    hidden=DEFAULT_HIDDEN,
    train_config: TrainConfig | None = None,
    seed: int = 0,
) -> BinaryClassifier:
    """Fit the in/out classifier on shadow-model posteriors of its own train
    (in) and held-out (out) records."""
    train_config = train_config or TrainConfig()
    f_in = salem_features(predict_proba(shadow_model, x_in))
    f_out = salem_features(predict_proba(shadow_model, x_out))
    feats = np.vstack([f_in, f_out])
    labels = np.r_[np.ones(len(f_in), bool), np.zeros(len(f_out), bool)]
    return BinaryClassifier.fit(feats, labels, hidden, train_config, seed)


def salem_attack(
    classifier: BinaryClassifier,
    target_model: MlpModel,
    x,
    sample_ids,
    ground_truth=None,
    threshold: float = 0.5,
) -> AttackOutput:
    scores = classifier.member_probability(salem_features(predict_proba(target_model, x)))
    return AttackOutput("salem", sample_ids, scores, ground_truth, threshold, {"top_k": SALEM_TOP_K})


def resolve_features(drop: str | None) -> tuple[str, ...]:
    if drop is None:
        return FEATURE_GROUPS
    if drop not in DROP_CHOICES:
        raise InputError(f"unknown feature removal {drop!r}; choose from {sorted(DROP_CHOICES)}")
    return tuple(g for g in FEATURE_GROUPS if g != DROP_CHOICES[drop])


def ldc_features(records: ScoreTable, n_classes: int, features=FEATURE_GROUPS) -> np.ndarray:
    """Columns in order: s_target, s_cal_enhanced, one-hot label (each only
    if its group is selected)."""
    cols = []
    if "s_target" in features:
        cols.append(records.s_target[:, None])
    if "s_cal" in features:
        cols.append(records.s_cal_enhanced[:, None])
    if "label" in features:
        if records.y.size and records.y.max() >= n_classes:
            raise InputError("record label exceeds n_classes")
        cols.append(np.eye(n_classes)[records.y])
    if not cols:
        raise InputError("at least one feature group is required")
    return np.hstack(cols)


@dataclass
class LdcClassifier:
    classifier: BinaryClassifier
    n_classes: int
    features: tuple[str, ...] = FEATURE_GROUPS

    @property
    def model(self) -> MlpModel:
        return self.classifier.model


def ldc_train(
    shadow_records: ScoreTable,
    n_classes: int,
    hidden=DEFAULT_HIDDEN,
    train_config: TrainConfig | None = None,
    seed: int = 0,
    drop: str | None = None,
) -> LdcClassifier:
    if len(hidden) != 2:
        raise InputError("the LDC classifier has exactly two hidden layers")
    if shadow_records.is_member is None:
        raise InputError("shadow records need ground-truth membership")
    features = resolve_features(drop)
    f = ldc_features(shadow_records, n_classes, features)
    clf = BinaryClassifier.fit(f, shadow_records.is_member, hidden, train_config or TrainConfig(), seed)
    return LdcClassifier(clf, n_classes, features)


def ldc_infer(clf: LdcClassifier, target_records: ScoreTable, threshold: float = 0.5) -> AttackOutput:
    f = ldc_features(target_records, clf.n_classes, clf.features)
    scores = clf.classifier.member_probability(f)
    name = "ldc" if clf.features == FEATURE_GROUPS else "ldc[" + "+".join(clf.features) + "]"
    return AttackOutput(name, target_records.sample_id, scores, target_records.is_member, threshold, {"features": list(clf.features)})


# -- reduced online LiRA ---------------------------------------------------

Trainer = Callable[[np.ndarray, np.ndarray, int], MlpModel]


@dataclass(frozen=True)
class LiraConfig:
    n_shadow: int = 8
    transform: Literal["logit", "log_prob"] = "logit"
    variance_floor: float = 1e-4

    def __post_init__(self):
        if self.n_shadow < 2 or self.n_shadow % 2:
            raise InputError("n_shadow must be even and >= 2")
        if self.transform not in ("logit", "log_prob"):
            raise InputError(f"unknown LiRA transform {self.transform!r}")
        if not self.variance_floor > 0:
            raise InputError("variance_floor must be positive")


def lira_transform(model: MlpModel, x, y: int, transform: str = "logit") -> float:
    p = float(predict_proba(model, x)[int(y)])
    p = min(max(p, 1e-12), 1.0 - 1e-12)
    if transform == "log_prob":
        return math.log(p)
    return math.log(p) - math.log1p(-p)


def gaussian_logpdf(v: float, mu: float, var: float) -> float:
    return -0.5 * (math.log(2 * math.pi * var) + (v - mu) ** 2 / var)


def lira_ratio(phi_target: float, phi_in, phi_out, variance_floor: float = 1e-4) -> float:
    """log N(phi | in fit) - log N(phi | out fit)."""
    phi_in = np.asarray(phi_in, dtype=np.float64)
    phi_out = np.asarray(phi_out, dtype=np.float64)
    var_in = max(float(phi_in.var()), variance_floor)
    var_out = max(float(phi_out.var()), variance_floor)
    return gaussian_logpdf(phi_target, float(phi_in.mean()), var_in) - gaussian_logpdf(
        phi_target, float(phi_out.mean()), var_out
    )


def lira_lite(
    x,
    y: int,
    target_model: MlpModel,
    aux_x,
    aux_y,
    trainer: Trainer,
    config: LiraConfig = LiraConfig(),
    seed: int = 0,
) -> float:
    """Per-sample likelihood ratio from ``n_shadow`` freshly trained models.

    Each pair of shadow models splits the aux pool into two disjoint random
    halves; the "in" model trains on one half plus the sample, the "out"
    model on the other half.
    """
    aux_x = np.asarray(aux_x, dtype=np.float64)
    aux_y = np.asarray(aux_y, dtype=np.int64)
    half = len(aux_x) // 2
    if half < 1:
        raise InputError("LiRA needs at least two auxiliary samples")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    phi_in, phi_out = [], []
    for k in range(config.n_shadow // 2):
        perm = rng.permutation(len(aux_x))
        a, b = perm[:half], perm[half : 2 * half]
        in_x = np.vstack([aux_x[a], x[None, :]])
        in_y = np.r_[aux_y[a], int(y)]
        m_in = trainer(in_x, in_y, 2 * k)
        m_out = trainer(aux_x[b], aux_y[b], 2 * k + 1)
        phi_in.append(lira_transform(m_in, x, y, config.transform))
        phi_out.append(lira_transform(m_out, x, y, config.transform))
    phi = lira_transform(target_model, x, y, config.transform)
    return lira_ratio(phi, phi_in, phi_out, config.variance_floor)


def lira_attack(
    target_model: MlpModel,
    x,
    y,
    sample_ids,
    aux_x,
    aux_y,
    trainer: Trainer,
    config: LiraConfig = LiraConfig(),
    seeds=None,
    ground_truth=None,
) -> AttackOutput:
    x = np.asarray(x, dtype=np.float64)
    seeds = range(len(x)) if seeds is None else seeds
    scores = [
        lira_lite(xi, int(yi), target_model, aux_x, aux_y, trainer, config, int(s))
        for xi, yi, s in zip(x, np.asarray(y), seeds)
    ]
    cfg = {"n_shadow": config.n_shadow, "transform": config.transform, "variance_floor": config.variance_floor}
    return AttackOutput("lira", sample_ids, scores, ground_truth, 0.0, cfg)
