"""End-to-end audit runs: split, train, score, attack, evaluate, write.

All randomness derives from one master seed through :func:`derive_seed`, so
a run directory is a pure function of its config.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attacks as atk
from .data import SPLIT_NAMES, LabeledDataset, SixWaySplit, SplitSpec, SyntheticSpec, load_csv, normalize, split_six, synth_generate
from .errors import ConfigError, DataError, InputError, LdcMiaError, ReportError, TrainingError
from .metrics import DEFAULT_FPR_TARGETS, MetricsReport, evaluate
from .nn import DpConfig, MlpConfig, MlpModel, TrainConfig, TrainHistory, accuracy, embed, load_model, save_model, train
from .scores import ScoreTable, build_records

log = logging.getLogger(__name__)

KNOWN_ATTACKS = ("yeom", "salem", "watson", "ldc", "lira")
MODEL_ROLES = ("target", "shadow", "reference", "ldc", "salem")
OUT_ENV = "LDCMIA_OUT"

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN, EXIT_REPORT = 0, 2, 3, 4, 5


def derive_seed(master: int, stage: str, index: int = 0) -> int:
    """63-bit child seed: blake2b over ``"<master>/<stage>/<index>"``."""
    digest = hashlib.blake2b(f"{master}/{stage}/{index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & (2**63 - 1)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class StageError(LdcMiaError):
    def __init__(self, stage: str, exit_code: int, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.exit_code = exit_code
        self.cause = cause


_EXIT_FOR = ((ConfigError, EXIT_CONFIG), (DataError, EXIT_DATA), (TrainingError, EXIT_TRAIN), (ReportError, EXIT_REPORT))


class _stage:
    """Context manager tagging failures with the stage name and exit code."""

    def __init__(self, name: str, default_code: int):
        self.name = name
        self.default_code = default_code

    def __enter__(self):
        log.info("stage %s", self.name)

    def __exit__(self, exc_type, exc, tb):
        if exc is None or isinstance(exc, StageError):
            return False
        if not isinstance(exc, (LdcMiaError, ValueError, OSError, FloatingPointError)):
            return False
        code = next((c for t, c in _EXIT_FOR if isinstance(exc, t)), self.default_code)
        raise StageError(self.name, code, exc) from exc


DEFAULT_TRAIN = {
    "epochs": 100,
    "batch_size": 64,
    "base_lr": 0.1,
    "momentum": 0.9,
    "nesterov": True,
    "optimizer": "sgdm",
    "lr_schedule": "cosine",
}


def default_config() -> dict:
    """Desk-scale synthetic fixture with a strongly overfit target."""
    model_train = dict(DEFAULT_TRAIN, epochs=100)
    clf_train = dict(DEFAULT_TRAIN, epochs=40, base_lr=0.05)
    return {
        "dataset": {
            "kind": "synthetic",
            "n_classes": 2,
            "n_features": 20,
            "samples_per_class": 1500,
            "separation": 0.8,
            "std": 1.0,
        },
        "split": {
            "target_train": 500,
            "target_heldout": 500,
            "shadow_train": 500,
            "shadow_heldout": 500,
            "ref_train": 500,
            "test": 500,
        },
        "models": {
            "target": {"hidden": [256]},
            "shadow": {"hidden": [256]},
            "reference": {"hidden": [256], "select_by_val": True},
            "ldc": {"hidden": [64, 32]},
            "salem": {"hidden": [64, 32]},
        },
        "training": {
            "target": dict(model_train),
            "shadow": dict(model_train),
            "reference": dict(model_train),
            "ldc": dict(clf_train),
            "salem": dict(clf_train),
        },
        "attacks": ["yeom", "salem", "watson", "ldc"],
        "theta": 0.0,
        "fpr_targets": list(DEFAULT_FPR_TARGETS),
        "ldc_drop": None,
        "lira": {"n_shadow": 8, "max_samples": 40, "transform": "logit", "variance_floor": 1e-4},
        "seed": 0,
    }


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    raw: dict

    @classmethod
    def from_dict(cls, override: dict | None = None, base: dict | None = None) -> "RunConfig":
        raw = _merge(base or default_config(), override or {})
        cfg = cls(raw)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            override = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(override, dict):
            raise ConfigError("config file must hold a JSON object")
        override.pop("ablation", None)
        return cls.from_dict(override)

    def validate(self) -> None:
        r = self.raw
        try:
            kind = r["dataset"]["kind"]
            if kind == "csv":
                r["dataset"]["path"], r["dataset"]["label_column"]
            elif kind == "synthetic":
                self.synthetic_spec()
            else:
                raise ConfigError(f"unknown dataset kind {kind!r}")
            if not isinstance(r["seed"], int):
                raise ConfigError("seed must be an integer")
            if not r["attacks"]:
                raise ConfigError("attack list is empty")
            unknown = set(r["attacks"]) - set(KNOWN_ATTACKS)
            if unknown:
                raise ConfigError(f"unknown attacks {sorted(unknown)}")
            for role in MODEL_ROLES:
                self.train_config(role)
                self.hidden(role)
            if len(self.hidden("ldc")) != 2:
                raise ConfigError("ldc classifier needs exactly two hidden layers")
            self.split_spec()
            atk.resolve_features(r.get("ldc_drop"))
            self.lira_config()
            for t in r["fpr_targets"]:
                if not 0 < float(t) < 1:
                    raise ConfigError(f"fpr target {t} outside (0, 1)")
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc!r}") from exc

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    def with_seed(self, seed: int) -> "RunConfig":
        raw = copy.deepcopy(self.raw)
        raw["seed"] = int(seed)
        return RunConfig(raw)

    def digest(self) -> str:
        return atk.config_digest(self.raw)

    def synthetic_spec(self) -> SyntheticSpec:
        d = {k: v for k, v in self.raw["dataset"].items() if k != "kind"}
        return SyntheticSpec(**d, seed=derive_seed(self.seed, "synthetic"))

    def split_spec(self) -> SplitSpec:
        s = self.raw["split"]
        return SplitSpec(**{k: s[k] for k in SPLIT_NAMES}, seed=derive_seed(self.seed, "split"))

    def hidden(self, role: str) -> tuple[int, ...]:
        return tuple(int(h) for h in self.raw["models"][role]["hidden"])

    def train_config(self, role: str) -> TrainConfig:
        t = dict(self.raw["training"][role])
        dp = t.pop("dp", None)
        dp_cfg = None
        if dp is not None:
            dp_cfg = DpConfig(
                clip_bound=float(dp.get("clip_bound", 10.0)),
                noise_multiplier=float(dp.get("noise_multiplier", 0.0)),
                seed=derive_seed(self.seed, f"{role}/dp"),
            )
        return TrainConfig(**t, seed=derive_seed(self.seed, f"{role}/shuffle"), dp=dp_cfg)

    def lira_config(self) -> atk.LiraConfig:
        lc = self.raw.get("lira", {})
        return atk.LiraConfig(
            n_shadow=int(lc.get("n_shadow", 8)),
            transform=lc.get("transform", "logit"),
            variance_floor=float(lc.get("variance_floor", 1e-4)),
        )


def load_dataset_for(config: RunConfig) -> LabeledDataset:
    ds = config.raw["dataset"]
    if ds["kind"] == "csv":
        return load_csv(ds["path"], ds["label_column"], ds.get("categorical_columns", ()))
    return synth_generate(config.synthetic_spec())


def prepare_data(config: RunConfig) -> tuple[LabeledDataset, SixWaySplit, dict]:
    """Load, split, and z-score with statistics of the attacker's auxiliary
    pool only."""
    with _stage("ingest", EXIT_DATA):
        raw = load_dataset_for(config)
    with _stage("split", EXIT_DATA):
        split = split_six(raw, config.split_spec())
        dataset, mean, std = normalize(raw, split.auxiliary)
    info = {"n_samples": raw.n_samples, "n_features": raw.n_features, "n_classes": raw.n_classes, "dropped_rows": raw.dropped_rows}
    return dataset, split, info


def train_role(config: RunConfig, role: str, x, y, n_in: int, n_out: int, val=None) -> tuple[MlpModel, TrainHistory]:
    init = MlpConfig((n_in, *config.hidden(role), n_out), seed=derive_seed(config.seed, f"{role}/init"))
    if not config.raw["models"][role].get("select_by_val", False):
        val = None
    return train(MlpModel.init(init), x, y, config.train_config(role), val)


@dataclass
class RunResult:
    config: RunConfig
    split: SixWaySplit
    models: dict[str, MlpModel]
    shadow_records: ScoreTable
    target_records: ScoreTable
    outputs: dict[str, atk.AttackOutput] = field(default_factory=dict)
    reports: dict[str, MetricsReport] = field(default_factory=dict)
    accuracies: dict[str, dict[str, float]] = field(default_factory=dict)
    data_info: dict = field(default_factory=dict)
    histories: dict[str, TrainHistory] = field(default_factory=dict)
    prior_training_info: dict = field(default_factory=dict)

    def training_info(self) -> dict:
        """Per-role best epoch and largest post-clip gradient norm (DP runs)."""
        if not self.histories:
            return self.prior_training_info
        return {
            role: {"epochs_run": len(h.loss), "best_epoch": h.best_epoch, "max_clipped_norm": h.max_clipped_norm}
            for role, h in sorted(self.histories.items())
        }


def score_stage(config: RunConfig, dataset: LabeledDataset, split: SixWaySplit) -> RunResult:
    """Train target / shadow / reference and build both score tables."""
    x, y = dataset.features, dataset.labels
    k = dataset.n_classes
    split_rows = {
        "target": split.target_train,
        "shadow": split.shadow_train,
        "reference": split.ref_train,
    }
    models, histories = {}, {}
    with _stage("train", EXIT_TRAIN):
        for role, idx in split_rows.items():
            models[role], histories[role] = train_role(
                config, role, x[idx], y[idx], dataset.n_features, k, dataset.subset(split.test)
            )
    accs = {
        role: {"train": accuracy(models[role], x[idx], y[idx]), "test": accuracy(models[role], *dataset.subset(split.test))}
        for role, idx in split_rows.items()
    }
    theta = float(config.raw["theta"])
    with _stage("score", EXIT_TRAIN):
        aux_ids = np.concatenate([split.shadow_train, split.shadow_heldout])
        aux_embeds = embed(models["reference"], x[aux_ids])
        shadow_member = np.r_[np.ones(len(split.shadow_train), bool), np.zeros(len(split.shadow_heldout), bool)]
        shadow_records = build_records(
            models["shadow"], models["reference"], x[aux_ids], y[aux_ids], aux_ids, aux_embeds, aux_ids, theta, shadow_member
        )
        target_ids = np.concatenate([split.target_train, split.target_heldout])
        target_member = np.r_[np.ones(len(split.target_train), bool), np.zeros(len(split.target_heldout), bool)]
        target_records = build_records(
            models["target"], models["reference"], x[target_ids], y[target_ids], target_ids, aux_embeds, None, theta, target_member
        )
    return RunResult(config, split, models, shadow_records, target_records, accuracies=accs, histories=histories)


def _lira_subset(config: RunConfig, records: ScoreTable) -> np.ndarray:
    """Balanced seeded subsample of target records for the per-sample LiRA."""
    max_n = int(config.raw.get("lira", {}).get("max_samples", 40))
    rng = np.random.default_rng(derive_seed(config.seed, "lira/subset"))
    members = np.nonzero(records.is_member)[0]
    nonmembers = np.nonzero(~records.is_member)[0]
    per = max(1, max_n // 2)
    pick = np.r_[
        rng.choice(members, min(per, len(members)), replace=False),
        rng.choice(nonmembers, min(per, len(nonmembers)), replace=False),
    ]
    return np.sort(pick)


def attack_stage(result: RunResult, dataset: LabeledDataset, attacks=None) -> RunResult:
    config = result.config
    x, y = dataset.features, dataset.labels
    split = result.split
    shadow, target = result.shadow_records, result.target_records
    attacks = attacks or config.raw["attacks"]
    with _stage("attack", EXIT_TRAIN):
        for name in attacks:
            if name == "yeom":
                thr = atk.best_balanced_threshold(shadow.s_target, shadow.is_member)
                out = atk.yeom_attack(target, thr)
            elif name == "watson":
                thr = atk.best_balanced_threshold(shadow.s_cal_basic, shadow.is_member)
                out = atk.watson_attack(target, thr)
            elif name == "salem":
                clf = atk.salem_train(
                    result.models["shadow"], x[split.shadow_train], x[split.shadow_heldout],
                    config.hidden("salem"), config.train_config("salem"), derive_seed(config.seed, "salem/init"),
                )
                result.models["salem"] = clf.model
                out = atk.salem_attack(clf, result.models["target"], x[target.sample_id], target.sample_id, target.is_member)
            elif name == "ldc":
                clf = atk.ldc_train(
                    shadow, dataset.n_classes, config.hidden("ldc"), config.train_config("ldc"),
                    derive_seed(config.seed, "ldc/init"), config.raw.get("ldc_drop"),
                )
                result.models["ldc"] = clf.model
                out = atk.ldc_infer(clf, target)
            elif name == "lira":
                out = _run_lira(result, dataset)
            else:
                raise ConfigError(f"unknown attack {name!r}")
            out.config.setdefault("seed", config.seed)
            result.outputs[name] = out
    with _stage("metrics", EXIT_REPORT):
        targets = config.raw["fpr_targets"]
        for name, out in result.outputs.items():
            result.reports[name] = evaluate(out.attack_name, out.scores, out.ground_truth, out.threshold, config.seed, targets)
    return result


def _run_lira(result: RunResult, dataset: LabeledDataset) -> atk.AttackOutput:
    config = result.config
    x, y = dataset.features, dataset.labels
    pool = result.split.auxiliary
    rows = _lira_subset(config, result.target_records)
    recs = result.target_records.take(rows)
    hidden = config.hidden("shadow")
    tcfg = config.train_config("shadow")

    def trainer_for(sid: int):
        def trainer(tx, ty, index):
            init = MlpConfig((dataset.n_features, *hidden, dataset.n_classes), seed=derive_seed(config.seed, f"lira/{sid}/init", index))
            return train(MlpModel.init(init), tx, ty, tcfg)[0]

        return trainer

    scores = []
    for sid, yi in zip(recs.sample_id.tolist(), recs.y.tolist()):
        seed = derive_seed(config.seed, "lira/pairs", sid)
        scores.append(atk.lira_lite(x[sid], yi, result.models["target"], x[pool], y[pool], trainer_for(sid), config.lira_config(), seed))
    lc = config.lira_config()
    cfg = {"n_shadow": lc.n_shadow, "transform": lc.transform, "variance_floor": lc.variance_floor, "n_samples": len(rows)}
    return atk.AttackOutput("lira", recs.sample_id, scores, recs.is_member, 0.0, cfg)


def seed_table(config: RunConfig) -> dict[str, int]:
    stages = ["synthetic", "split"]
    for role in MODEL_ROLES:
        stages += [f"{role}/init", f"{role}/shuffle", f"{role}/dp"]
    return {s: derive_seed(config.seed, s) for s in stages}


def write_run(result: RunResult, out_dir, stages=("score", "attack")) -> dict:
    """Write artifacts and a manifest with a sha256 per file."""
    out = Path(out_dir)
    for sub in ("models", "scores", "attacks", "metrics"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    files: list[str] = []

    def rel(p: Path) -> str:
        files.append(p.relative_to(out).as_posix())
        return files[-1]

    (out / "config.json").write_text(json.dumps(result.config.raw, indent=2, sort_keys=True) + "\n")
    rel(out / "config.json")
    result.split.save(out / "split.json")
    rel(out / "split.json")
    for role, model in sorted(result.models.items()):
        save_model(model, out / "models" / f"{role}.mlp")
        rel(out / "models" / f"{role}.mlp")
    result.shadow_records.to_csv(out / "scores" / "shadow_records.csv")
    rel(out / "scores" / "shadow_records.csv")
    result.target_records.to_csv(out / "scores" / "target_records.csv")
    rel(out / "scores" / "target_records.csv")
    for name, o in result.outputs.items():
        o.to_csv(out / "attacks" / f"{name}.csv")
        rel(out / "attacks" / f"{name}.csv")
        (out / "attacks" / f"{name}.json").write_text(o.sidecar())
        rel(out / "attacks" / f"{name}.json")
    for name, rep in result.reports.items():
        for f in rep.write(out / "metrics", name).values():
            rel(out / "metrics" / f)
    manifest = {
        "config_digest": result.config.digest(),
        "master_seed": result.config.seed,
        "seeds": seed_table(result.config),
        "stages": list(stages),
        "data": result.data_info,
        "split_sizes": result.split.sizes(),
        "model_accuracy": result.accuracies,
        "training": result.training_info(),
        "attacks": list(result.outputs),
        "artifacts": {f: sha256_file(out / f) for f in sorted(files)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def run_pipeline(config: RunConfig, out_dir=None, attacks=None) -> RunResult:
    dataset, split, info = prepare_data(config)
    result = score_stage(config, dataset, split)
    result.data_info = info
    attack_stage(result, dataset, attacks)
    if out_dir is not None:
        with _stage("write", EXIT_REPORT):
            write_run(result, out_dir)
    return result


def run_score_only(config: RunConfig, out_dir) -> RunResult:
    dataset, split, info = prepare_data(config)
    result = score_stage(config, dataset, split)
    result.data_info = info
    with _stage("write", EXIT_REPORT):
        write_run(result, out_dir, stages=("score",))
    return result


def run_attacks_from_dir(run_dir, attacks=None) -> RunResult:
    """Re-attach to a scored run directory and run (more) attacks on it."""
    run_dir = Path(run_dir)
    with _stage("load", EXIT_REPORT):
        verify_manifest(run_dir)
        config = RunConfig.from_dict(json.loads((run_dir / "config.json").read_text()), base={})
        split = SixWaySplit.load(run_dir / "split.json")
        models = {p.stem: load_model(p) for p in sorted((run_dir / "models").glob("*.mlp"))}
        shadow = ScoreTable.from_csv(run_dir / "scores" / "shadow_records.csv")
        target = ScoreTable.from_csv(run_dir / "scores" / "target_records.csv")
        manifest = json.loads((run_dir / "manifest.json").read_text())
    dataset, split_again, info = prepare_data(config)
    if split_again.sizes() != split.sizes() or any(not np.array_equal(a, b) for a, b in zip(split.parts().values(), split_again.parts().values())):
        raise StageError("load", EXIT_DATA, DataError("regenerated split does not match split.json"))
    result = RunResult(
        config, split, models, shadow, target,
        accuracies=manifest.get("model_accuracy", {}), data_info=info, prior_training_info=manifest.get("training", {}),
    )
    attack_stage(result, dataset, attacks)
    with _stage("write", EXIT_REPORT):
        write_run(result, run_dir)
    return result


def verify_manifest(run_dir) -> dict:
    run_dir = Path(run_dir)
    path = run_dir / "manifest.json"
    if not path.exists():
        raise ReportError(f"missing {path}")
    manifest = json.loads(path.read_text())
    for rel_path, digest in manifest["artifacts"].items():
        f = run_dir / rel_path
        if not f.exists():
            raise ReportError(f"missing artifact {f}")
        if sha256_file(f) != digest:
            raise ReportError(f"hash mismatch for {f}")
    return manifest


REPORT_COLUMNS = ("attack", "auc", "balanced_accuracy", "tpr@0.01%fpr", "tpr@0.1%fpr", "tpr@1%fpr")
_REPORT_FPRS = (1e-4, 1e-3, 1e-2)


def cmd_report(run_dir) -> list[dict]:
    """Consolidated per-attack table as ``report.csv`` and ``report.txt``."""
    run_dir = Path(run_dir)
    manifest = verify_manifest(run_dir)
    rows = []
    for name in manifest["attacks"]:
        f = run_dir / "metrics" / f"{name}.json"
        if not f.exists():
            raise ReportError(f"missing metrics file {f}")
        rep = json.loads(f.read_text())
        tprs = rep["tpr_at_fpr"]
        row = {"attack": rep["attack"], "auc": rep["auc"], "balanced_accuracy": rep["balanced_accuracy"]}
        for col, fpr in zip(REPORT_COLUMNS[3:], _REPORT_FPRS):
            key = repr(fpr)
            if key not in tprs:
                raise ReportError(f"{f} lacks TPR at FPR {fpr}")
            row[col] = tprs[key]
        rows.append(row)
    with open(run_dir / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    lines = [f"{'attack':<24}{'AUC':>8}{'BalAcc':>8}{'TPR@0.01%':>11}{'TPR@0.1%':>10}{'TPR@1%':>9}"]
    for r in rows:
        lines.append(
            f"{r['attack']:<24}{r['auc']:>8.4f}{r['balanced_accuracy']:>8.4f}"
            f"{100 * r['tpr@0.01%fpr']:>10.2f}%{100 * r['tpr@0.1%fpr']:>9.2f}%{100 * r['tpr@1%fpr']:>8.2f}%"
        )
    (run_dir / "report.txt").write_text("\n".join(lines) + "\n")
    return rows


# -- ablations ---------------------------------------------------------------

ABLATION_KINDS = ("feature_removal", "train_size_sweep", "aux_size_sweep", "optimizer_sweep", "dp_sweep")
_OPTIMIZERS = ("sgd", "sgdm", "adam")
# grids used when an ablation spec omits "grid"
DEFAULT_GRIDS = {
    "feature_removal": ("drop_label", "drop_s_target", "drop_s_cal"),
    "train_size_sweep": (6500, 8000, 9500, 11000, 12500),
    "optimizer_sweep": tuple(f"{t}:{s}" for t in _OPTIMIZERS for s in _OPTIMIZERS),
    "dp_sweep": (0.0, 0.2, 0.3, 0.6, 1.0),
}


@dataclass(frozen=True)
class AblationSpec:
    kind: str
    grid: tuple
    repeats: int = 1

    def __post_init__(self):
        if self.kind not in ABLATION_KINDS:
            raise ConfigError(f"unknown ablation kind {self.kind!r}")
        if not self.grid:
            raise ConfigError("ablation grid is empty")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        object.__setattr__(self, "grid", tuple(self.grid))

    @classmethod
    def from_dict(cls, d: dict) -> "AblationSpec":
        try:
            kind = d["kind"]
            grid = d["grid"] if "grid" in d else DEFAULT_GRIDS.get(kind, ())
            return cls(kind, tuple(grid), int(d.get("repeats", 1)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid ablation spec: {exc!r}") from exc


def apply_cell(config: RunConfig, kind: str, value) -> RunConfig:
    """Config for one grid value; only the swept variable changes."""
    raw = copy.deepcopy(config.raw)
    if kind == "feature_removal":
        raw["ldc_drop"] = None if value in (None, "none") else value
        raw["attacks"] = ["ldc"]
    elif kind == "train_size_sweep":
        raw["split"]["target_train"] = int(value)
    elif kind == "aux_size_sweep":
        for part in ("shadow_train", "shadow_heldout", "ref_train"):
            raw["split"][part] = int(value)
    elif kind == "optimizer_sweep":
        target_opt, _, shadow_opt = str(value).partition(":")
        raw["training"]["target"]["optimizer"] = target_opt
        if shadow_opt:
            raw["training"]["shadow"]["optimizer"] = shadow_opt
    elif kind == "dp_sweep":
        dp = dict(raw["training"]["target"].get("dp") or {"clip_bound": 10.0})
        dp["noise_multiplier"] = float(value)
        raw["training"]["target"]["dp"] = dp
    else:
        raise ConfigError(f"unknown ablation kind {kind!r}")
    cfg = RunConfig(raw)
    cfg.validate()
    return cfg


SWEEP_COLUMNS = ("kind", "grid_index", "grid_value", "repeat", "seed", "attack", "status", "auc", "balanced_accuracy")


def cmd_ablate(config: RunConfig, ablation: AblationSpec, out_dir, parallelism: int = 1) -> list[dict]:
    """Run every (grid value, repeat) cell; repeats share a seed across grid
    values so cells differ only in the swept variable."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fprs = [float(t) for t in config.raw["fpr_targets"]]
    cells = [(gi, v, r) for gi, v in enumerate(ablation.grid) for r in range(ablation.repeats)]

    def run_cell(cell):
        gi, value, rep = cell
        seed = derive_seed(config.seed, "repeat", rep)
        base = {"kind": ablation.kind, "grid_index": gi, "grid_value": value, "repeat": rep, "seed": seed}
        try:
            cfg = apply_cell(config.with_seed(seed), ablation.kind, value)
            result = run_pipeline(cfg, out / f"cell_{gi:03d}_{rep:03d}")
        except (StageError, LdcMiaError) as exc:
            log.error("cell %s failed: %s", cell, exc)
            return [dict(base, attack="", status=f"error: {exc}")]
        rows = []
        for name, rep_ in result.reports.items():
            row = dict(base, attack=rep_.attack_name, status="ok", auc=rep_.auc, balanced_accuracy=rep_.balanced_accuracy)
            for t in fprs:
                row[f"tpr@{t!r}"] = rep_.tpr_at_fpr[t]
            rows.append(row)
        return rows

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        results = list(pool.map(run_cell, cells))
    rows = [r for cell_rows in results for r in cell_rows]
    columns = list(SWEEP_COLUMNS) + [f"tpr@{t!r}" for t in fprs]
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, restval="")
        w.writeheader()
        w.writerows(rows)
    return rows


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))
