"""Membership inference auditing with learned difficulty calibration."""

from .attacks import AttackOutput, LdcClassifier, LiraConfig, ldc_infer, ldc_train, lira_lite, salem_attack, watson_attack, yeom_attack
from .data import LabeledDataset, SixWaySplit, SplitSpec, SyntheticSpec, load_csv, normalize, split_six, synth_generate
from .metrics import MetricsReport, auc, balanced_accuracy, pr_curve, precision_at_recall, roc_curve, tpr_at_fpr
from .nn import DpConfig, MlpConfig, MlpModel, TrainConfig, backward, cross_entropy, embed, forward, predict_proba, softmax, train
from .scores import ScoreRecord, ScoreTable, build_records, calibrated_score, enhanced_calibrated_score, hardness_bucket, membership_score, neighborhood_info

__version__ = "0.1.0"
