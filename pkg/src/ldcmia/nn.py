"""Feed-forward ReLU networks trained with hand-written backpropagation.

Every model in the toolkit (target, shadow, reference and the attack
classifiers) is an :class:`MlpModel`.  Weights are stored ``(out, in)`` so a
layer computes ``a @ W.T + b`` on a row-major batch.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import InputError, TrainingError

PROB_FLOOR = 1e-12
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_MAGIC = b"LDCMLP"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class MlpConfig:
    layer_sizes: tuple[int, ...]
    activation: Literal["relu"] = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise InputError("an MLP needs at least an input and an output layer")
        if any(s < 1 for s in self.layer_sizes):
            raise InputError(f"layer sizes must be >= 1, got {self.layer_sizes}")
        if self.activation != "relu":
            raise InputError(f"unsupported activation {self.activation!r}")


@dataclass(frozen=True)
class DpConfig:
    clip_bound: float = 10.0
    noise_multiplier: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.clip_bound > 0:
            raise InputError("clip_bound must be positive")
        if self.noise_multiplier < 0:
            raise InputError("noise_multiplier must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    base_lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    optimizer: Literal["sgd", "sgdm", "adam"] = "sgdm"
    lr_schedule: Literal["constant", "cosine"] = "cosine"
    seed: int = 0
    dp: DpConfig | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise InputError("epochs must be >= 1")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise InputError("momentum must lie in [0, 1)")
        if not self.base_lr > 0:
            raise InputError("base_lr must be positive")
        if self.optimizer not in ("sgd", "sgdm", "adam"):
            raise InputError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise InputError(f"unknown lr_schedule {self.lr_schedule!r}")


@dataclass
class MlpModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    config: MlpConfig

    def __post_init__(self):
        sizes = self.config.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise InputError("parameter count does not match layer_sizes")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[l + 1], sizes[l]) or b.shape != (sizes[l + 1],):
                raise InputError(f"layer {l} has shapes {w.shape}/{b.shape}")

    @classmethod
    def init(cls, config: MlpConfig) -> "MlpModel":
        """Glorot-uniform weights and zero biases, seeded by ``config.seed``."""
        rng = np.random.default_rng(config.seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(config.layer_sizes[:-1], config.layer_sizes[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, config)

    @property
    def n_inputs(self) -> int:
        return self.config.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.config.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpModel":
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.config)

    def params(self) -> list[np.ndarray]:
        """Parameters in layer order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def _as_batch(model: MlpModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.n_inputs:
        raise InputError(f"expected input width {model.n_inputs}, got shape {x.shape}")
    return x, single


def _forward_cache(model: MlpModel, x: np.ndarray):
    pre, post = [], [x]
    a = x
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        pre.append(z)
        a = z if l == last else np.maximum(z, 0.0)
        post.append(a)
    return pre, post


def forward(model: MlpModel, x):
    """Return ``(logits, penultimate)`` for a vector or a batch of rows.

    ``penultimate`` is the post-ReLU output of the last hidden layer (the
    input itself for a network without hidden layers).
    """
    xb, single = _as_batch(model, x)
    _, post = _forward_cache(model, xb)
    logits, penult = post[-1], post[-2]
    if single:
        return logits[0], penult[0]
    return logits, penult


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, y) -> float | np.ndarray:
    """``-log(probs[y])`` with the probability clamped to ``PROB_FLOOR``.

    Accepts a single vector with an int label, or a batch with a label array
    (returning per-row losses).
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        y = int(y)
        if not 0 <= y < p.shape[0]:
            raise InputError(f"class index {y} out of range for {p.shape[0]} classes")
        return float(-math.log(max(p[y], PROB_FLOOR)))
    y = np.asarray(y)
    if y.shape != (p.shape[0],) or y.min() < 0 or y.max() >= p.shape[1]:
        raise InputError("labels do not match the probability batch")
    picked = p[np.arange(p.shape[0]), y]
    return -np.log(np.maximum(picked, PROB_FLOOR))


def predict_proba(model: MlpModel, x) -> np.ndarray:
    return softmax(forward(model, x)[0])


def embed(model: MlpModel, x) -> np.ndarray:
    return forward(model, x)[1]


def _check_labels(model: MlpModel, y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise InputError(f"got {y.shape[0]} labels for {n} rows")
    if n == 0:
        raise InputError("batch must be non-empty")
    if y.min() < 0 or y.max() >= model.n_outputs:
        raise InputError("label outside the output range")
    return y


def _output_delta(model, xb, y):
    pre, post = _forward_cache(model, xb)
    probs = softmax(post[-1])
    delta = probs.copy()
    delta[np.arange(len(y)), y] -= 1.0
    return pre, post, delta, probs


def backward(model: MlpModel, batch_x, batch_y) -> list[np.ndarray]:
    """Mean cross-entropy gradient, laid out like :meth:`MlpModel.params`."""
    xb, _ = _as_batch(model, batch_x)
    y = _check_labels(model, batch_y, xb.shape[0])
    return _mean_grads(model, xb, y)[0]


def _mean_grads(model, xb, y):
    pre, post, delta, probs = _output_delta(model, xb, y)
    delta /= xb.shape[0]
    grads: list[np.ndarray] = []
    for l in range(len(model.weights) - 1, -1, -1):
        grads.append(delta.sum(axis=0))
        grads.append(delta.T @ post[l])
        if l > 0:
            delta = (delta @ model.weights[l]) * (pre[l - 1] > 0)
    grads.reverse()
    return grads, probs


def per_example_gradients(model: MlpModel, batch_x, batch_y) -> list[np.ndarray]:
    """Per-example gradients; each entry has a leading batch axis."""
    xb, _ = _as_batch(model, batch_x)
    y = _check_labels(model, batch_y, xb.shape[0])
    pre, post, delta, _ = _output_delta(model, xb, y)
    grads: list[np.ndarray] = []
    for l in range(len(model.weights) - 1, -1, -1):
        grads.append(delta.copy())
        grads.append(np.einsum("no,ni->noi", delta, post[l]))
        if l > 0:
            delta = (delta @ model.weights[l]) * (pre[l - 1] > 0)
    grads.reverse()
    return grads


def clip_per_example(grads: list[np.ndarray], clip_bound: float) -> tuple[list[np.ndarray], np.ndarray]:
    """Scale each example's full gradient to L2 norm at most ``clip_bound``.

    Returns the clipped gradients and the per-example norms after clipping.
    """
    n = grads[0].shape[0]

    def norms_of(gs):
        sq = np.zeros(n)
        for g in gs:
            sq += (g.reshape(n, -1) ** 2).sum(axis=1)
        return np.sqrt(sq)

    def rescale(gs, scale):
        return [g * scale.reshape((n,) + (1,) * (g.ndim - 1)) for g in gs]

    norms = norms_of(grads)
    clipped = rescale(grads, np.minimum(1.0, clip_bound / np.maximum(norms, 1e-300)))
    # rounding can leave a clipped norm a few ulps above the bound
    after = norms_of(clipped)
    while (over := after > clip_bound).any():
        shrink = np.ones(n)
        shrink[over] = np.nextafter(clip_bound / after[over], 0.0)
        clipped = rescale(clipped, shrink)
        after = norms_of(clipped)
    return clipped, after


def cosine_lr(base_lr: float, t: int, total_steps: int) -> float:
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / total_steps))


class Optimizer:
    """SGD / Nesterov-or-heavy-ball momentum / Adam over an :class:`MlpModel`.

    ``step`` updates the model's arrays in place.  ``t`` counts completed
    steps and drives both the cosine schedule and Adam's bias correction.
    """

    def __init__(self, config: TrainConfig, model: MlpModel, total_steps: int):
        self.config = config
        self.total_steps = max(int(total_steps), 1)
        self.t = 0
        shapes = [p.shape for p in model.params()]
        if config.optimizer == "sgdm":
            self.buf = [np.zeros(s) for s in shapes]
        elif config.optimizer == "adam":
            self.m = [np.zeros(s) for s in shapes]
            self.v = [np.zeros(s) for s in shapes]

    def lr(self, t: int | None = None) -> float:
        t = self.t if t is None else t
        if self.config.lr_schedule == "cosine":
            return cosine_lr(self.config.base_lr, t, self.total_steps)
        return self.config.base_lr

    def step(self, model: MlpModel, grads: list[np.ndarray]) -> None:
        cfg = self.config
        lr = self.lr()
        params = model.params()
        if cfg.optimizer == "sgd":
            for p, g in zip(params, grads):
                p -= lr * g
        elif cfg.optimizer == "sgdm":
            mu = cfg.momentum
            for p, g, buf in zip(params, grads, self.buf):
                buf *= mu
                buf += g
                p -= lr * (g + mu * buf if cfg.nesterov else buf)
        else:
            k = self.t + 1
            c1 = 1.0 - ADAM_BETA1**k
            c2 = 1.0 - ADAM_BETA2**k
            for p, g, m, v in zip(params, grads, self.m, self.v):
                m *= ADAM_BETA1
                m += (1.0 - ADAM_BETA1) * g
                v *= ADAM_BETA2
                v += (1.0 - ADAM_BETA2) * g * g
                p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        self.t += 1


def dp_gradient(model: MlpModel, batch_x, batch_y, dp: DpConfig, rng: np.random.Generator):
    """Clipped, noised mean gradient and the post-clip per-example norms.

    Noise has per-coordinate std ``noise_multiplier * clip_bound / batch_size``.
    """
    per_ex = per_example_gradients(model, batch_x, batch_y)
    clipped, norms = clip_per_example(per_ex, dp.clip_bound)
    n = per_ex[0].shape[0]
    std = dp.noise_multiplier * dp.clip_bound / n
    out = []
    for g in clipped:
        mean = g.mean(axis=0)
        if std > 0:
            mean = mean + rng.normal(0.0, std, size=mean.shape)
        out.append(mean)
    return out, norms


def dp_sgd_step(model: MlpModel, optimizer: Optimizer, batch_x, batch_y, rng: np.random.Generator) -> np.ndarray:
    """One private update; returns post-clip per-example gradient norms."""
    dp = optimizer.config.dp
    if dp is None:
        raise InputError("dp_sgd_step requires TrainConfig.dp")
    grads, norms = dp_gradient(model, batch_x, batch_y, dp, rng)
    optimizer.step(model, grads)
    return norms


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    max_clipped_norm: float = 0.0


def train(model: MlpModel, x, y, config: TrainConfig, val=None) -> tuple[MlpModel, TrainHistory]:
    """Minibatch training; returns a trained copy plus per-epoch history.

    Batch order comes from ``config.seed``, DP noise from ``config.dp.seed``;
    the initial parameters are whatever ``model`` holds.  With ``val=(xv, yv)``
    the returned parameters are those of the epoch with the highest validation
    accuracy (earliest on ties).
    """
    x, _ = _as_batch(model, x)
    n = x.shape[0]
    if n == 0:
        raise InputError("cannot train on an empty dataset")
    y = _check_labels(model, y, n)
    model = model.copy()
    bs = min(config.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    opt = Optimizer(config, model, config.epochs * steps_per_epoch)
    shuffle_rng = np.random.default_rng(config.seed)
    noise_rng = np.random.default_rng(config.dp.seed) if config.dp else None
    hist = TrainHistory()
    for _ in range(config.epochs):
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            xb, yb = x[idx], y[idx]
            if config.dp is not None:
                probs = predict_proba(model, xb)
                norms = dp_sgd_step(model, opt, xb, yb, noise_rng)
                hist.max_clipped_norm = max(hist.max_clipped_norm, float(norms.max()))
            else:
                grads, probs = _mean_grads(model, xb, yb)
                opt.step(model, grads)
            loss_sum += float(cross_entropy(probs, yb).sum())
            correct += int((probs.argmax(axis=1) == yb).sum())
        epoch_loss = loss_sum / n
        if not math.isfinite(epoch_loss) or not all(np.isfinite(p).all() for p in model.params()):
            raise TrainingError("training diverged (non-finite loss or parameters)")
        hist.loss.append(epoch_loss)
        hist.accuracy.append(correct / n)
        if val is not None:
            acc = accuracy(model, *val)
            if not hist.val_accuracy or acc > max(hist.val_accuracy):
                best, hist.best_epoch = model.copy(), len(hist.val_accuracy)
            hist.val_accuracy.append(acc)
    if val is not None:
        model = best
    return model, hist


def accuracy(model: MlpModel, x, y) -> float:
    probs = predict_proba(model, x)
    return float((probs.argmax(axis=-1) == np.asarray(y)).mean())


def save_model(model: MlpModel, path) -> None:
    """Binary layout: magic, version, seed, layer count, sizes, then float64
    little-endian W0 (row-major), b0, W1, b1, ..."""
    sizes = model.config.layer_sizes
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Iq I", _FORMAT_VERSION, model.config.seed, len(sizes)))
        fh.write(struct.pack(f"<{len(sizes)}I", *sizes))
        for p in model.params():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_model(path) -> MlpModel:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise InputError(f"{path} is not a model file")
    off = len(_MAGIC)
    version, seed, n_layers = struct.unpack_from("<Iq I", data, off)
    if version != _FORMAT_VERSION:
        raise InputError(f"unsupported model format version {version}")
    off += struct.calcsize("<Iq I")
    sizes = struct.unpack_from(f"<{n_layers}I", data, off)
    off += 4 * n_layers
    config = MlpConfig(sizes, seed=seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(data, dtype="<f8", count=fan_in * fan_out, offset=off).reshape(fan_out, fan_in)
        off += 8 * w.size
        b = np.frombuffer(data, dtype="<f8", count=fan_out, offset=off)
        off += 8 * b.size
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    if off != len(data):
        raise InputError(f"{path} has {len(data) - off} trailing bytes")
    return MlpModel(weights, biases, config)


def with_seed(config: MlpConfig, seed: int) -> MlpConfig:
    return replace(config, seed=seed)
