"""Datasets, synthetic generation, normalization and the six-way split."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import CsvParseError, DataError, EmptyDatasetError, InputError, UnknownColumnError

log = logging.getLogger(__name__)

SPLIT_NAMES = ("target_train", "target_heldout", "shadow_train", "shadow_heldout", "ref_train", "test")
MISSING_TOKENS = ("", "?", "NA", "N/A", "nan", "NaN", "null")
STD_FLOOR = 1e-9


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    feature_names: tuple[str, ...]
    label_names: tuple[str, ...] = ()
    dropped_rows: int = 0

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise InputError(f"features {x.shape} and labels {y.shape} disagree")
        if len(self.feature_names) != x.shape[1]:
            raise InputError("feature_names length does not match feature width")
        if not np.isfinite(x).all():
            raise InputError("features contain non-finite values")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise InputError("labels outside [0, n_classes)")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(idx, dtype=np.int64)
        return self.features[idx], self.labels[idx]


def load_csv(path, label_column: str, categorical_columns=()) -> LabeledDataset:
    """Read a headered CSV: one-hot the categorical columns, pass numeric
    ones through, drop rows with missing values.

    Labels are mapped to indices in sorted order of their string form.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except FileNotFoundError as exc:
        raise DataError(f"dataset file {path} not found") from exc
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise CsvParseError(f"cannot parse {path}: {exc}") from exc
    frame.columns = [c.strip() for c in frame.columns]
    categorical_columns = list(categorical_columns)
    for col in [label_column, *categorical_columns]:
        if col not in frame.columns:
            raise UnknownColumnError(f"column {col!r} not in {path}")

    frame = frame.apply(lambda s: s.str.strip())
    missing = frame.isin(MISSING_TOKENS).any(axis=1)
    dropped = int(missing.sum())
    if dropped:
        log.warning("%s: dropped %d row(s) with missing values", path, dropped)
    frame = frame.loc[~missing].reset_index(drop=True)
    if frame.empty:
        raise EmptyDatasetError(f"{path}: no rows left after dropping missing values")

    label_values = sorted(frame[label_column].unique())
    label_index = {v: i for i, v in enumerate(label_values)}
    labels = frame[label_column].map(label_index).to_numpy(dtype=np.int64)

    blocks, names = [], []
    for col in frame.columns:
        if col == label_column:
            continue
        if col in categorical_columns:
            cats = sorted(frame[col].unique())
            blocks.append((frame[col].to_numpy()[:, None] == np.array(cats)[None, :]).astype(np.float64))
            names.extend(f"{col}={c}" for c in cats)
        else:
            try:
                blocks.append(frame[col].astype(np.float64).to_numpy()[:, None])
            except ValueError as exc:
                raise CsvParseError(f"{path}: column {col!r} is not numeric; list it as categorical") from exc
            names.append(col)
    features = np.hstack(blocks) if blocks else np.zeros((len(frame), 0))
    return LabeledDataset(features, labels, len(label_values), tuple(names), tuple(label_values), dropped)


def normalize(dataset: LabeledDataset, fit_indices) -> tuple[LabeledDataset, np.ndarray, np.ndarray]:
    """Z-score every row using mean/std of ``fit_indices`` only."""
    fit_indices = np.asarray(fit_indices, dtype=np.int64)
    if fit_indices.size == 0:
        raise InputError("fit_indices must be non-empty")
    fit = dataset.features[fit_indices]
    mean = fit.mean(axis=0)
    std = np.maximum(fit.std(axis=0), STD_FLOOR)
    out = LabeledDataset(
        (dataset.features - mean) / std,
        dataset.labels,
        dataset.n_classes,
        dataset.feature_names,
        dataset.label_names,
        dataset.dropped_rows,
    )
    return out, mean, std


@dataclass(frozen=True)
class SplitSpec:
    """Per-part sizes: ints are counts, floats in (0, 1) are dataset fractions."""

    target_train: float = 0.1
    target_heldout: float = 0.1
    shadow_train: float = 0.1
    shadow_heldout: float = 0.1
    ref_train: float = 0.1
    test: float = 0.1
    seed: int = 0

    def sizes(self, n: int) -> dict[str, int]:
        out = {}
        for name in SPLIT_NAMES:
            v = getattr(self, name)
            if isinstance(v, float) and 0 < v < 1:
                v = int(round(v * n))
            v = int(v)
            if v < 1:
                raise InputError(f"split part {name} must hold at least one sample")
            out[name] = v
        total = sum(out.values())
        if total > n:
            raise InputError(f"split needs {total} samples but the dataset has {n} (short by {total - n})")
        return out

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in (*SPLIT_NAMES, "seed")}


@dataclass(frozen=True)
class SixWaySplit:
    target_train: np.ndarray
    target_heldout: np.ndarray
    shadow_train: np.ndarray
    shadow_heldout: np.ndarray
    ref_train: np.ndarray
    test: np.ndarray

    def parts(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in SPLIT_NAMES}

    def sizes(self) -> dict[str, int]:
        return {name: int(len(v)) for name, v in self.parts().items()}

    @property
    def auxiliary(self) -> np.ndarray:
        """Attacker-held indices: shadow_train, shadow_heldout, ref_train."""
        return np.concatenate([self.shadow_train, self.shadow_heldout, self.ref_train])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({k: v.tolist() for k, v in self.parts().items()}, indent=1))

    @classmethod
    def load(cls, path) -> "SixWaySplit":
        raw = json.loads(Path(path).read_text())
        return cls(**{name: np.asarray(raw[name], dtype=np.int64) for name in SPLIT_NAMES})


def split_six(dataset: LabeledDataset | int, spec: SplitSpec) -> SixWaySplit:
    """Seeded permutation of the rows cut into consecutive blocks, in the
    fixed order of ``SPLIT_NAMES``."""
    n = dataset if isinstance(dataset, int) else dataset.n_samples
    sizes = spec.sizes(n)
    perm = np.random.default_rng(spec.seed).permutation(n)
    parts, start = {}, 0
    for name in SPLIT_NAMES:
        parts[name] = np.sort(perm[start : start + sizes[name]])
        start += sizes[name]
    return SixWaySplit(**parts)


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 2
    n_features: int = 20
    samples_per_class: int = 1000
    separation: float = 1.0
    std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.n_classes, self.n_features, self.samples_per_class) < 1:
            raise InputError("synthetic counts must be >= 1")
        if not self.std > 0:
            raise InputError("synthetic std must be positive")


def synth_generate(spec: SyntheticSpec) -> LabeledDataset:
    """Isotropic Gaussian clusters, one per class, with balanced counts.

    Class ``c`` is centred on ``separation * e_(c mod d)``; classes that wrap
    past the feature count take the negative axis on odd wraps.
    """
    rng = np.random.default_rng(spec.seed)
    d, k, m = spec.n_features, spec.n_classes, spec.samples_per_class
    means = np.zeros((k, d))
    for c in range(k):
        means[c, c % d] = spec.separation * (1.0 if (c // d) % 2 == 0 else -1.0)
    labels = np.repeat(np.arange(k), m)
    features = means[labels] + spec.std * rng.standard_normal((k * m, d))
    names = tuple(f"x{i}" for i in range(d))
    return LabeledDataset(features, labels, k, names, tuple(str(c) for c in range(k)))


def save_dataset(dataset: LabeledDataset, path) -> None:
    """Text format: a JSON header line then one ``label,f1,...`` row per sample.

    Floats are written with ``repr`` so reloading is bit-exact.
    """
    header = {
        "n": dataset.n_samples,
        "d": dataset.n_features,
        "n_classes": dataset.n_classes,
        "feature_names": list(dataset.feature_names),
        "label_names": list(dataset.label_names),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for label, row in zip(dataset.labels, dataset.features):
            fh.write(",".join([str(int(label)), *map(repr, row.tolist())]) + "\n")


def load_dataset(path) -> LabeledDataset:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    if len(rows) != header["n"]:
        raise DataError(f"{path}: header says {header['n']} rows, found {len(rows)}")
    labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
    features = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64).reshape(header["n"], header["d"])
    return LabeledDataset(features, labels, header["n_classes"], tuple(header["feature_names"]), tuple(header["label_names"]))
