"""Attention-gated classification head trained with decoupled weight decay.

The head is the smallest structure that still earns its "attention" name:
a two-layer MLP mapping each embedding to a per-channel sigmoid gate in
(0, 1), multiplied elementwise into the embedding before a single linear
classification layer. Training is shuffled mini-batch softmax
cross-entropy with AdamW, a cosine-annealed learning rate, and periodic
hard-sample mining (extra epochs on samples whose loss exceeds ``delta``
times the mean). All arithmetic is float64 internally; parameters
serialize to 32-bit.

DARCH1 layout (little-endian): magic b"DARCH", version u32 = 1, then
dim/h/n_classes as u32 and the arrays w1 (dim x h), b1, w2 (h x dim), b2,
cls_w (dim x n_classes), cls_b, each row-major f32.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .calibrate import CalibratedSet
from .errors import ConfigError, FormatError, LengthError, ValidationError

PARAMS_MAGIC = b"DARCH"
PARAMS_VERSION = 1

_INIT_DOMAIN = 11
_SHUFFLE_DOMAIN = 12

# Parameter names; decay applies to the weight matrices, never the biases.
_PARAM_NAMES = ("w1", "b1", "w2", "b2", "cls_w", "cls_b")
_DECAYED = frozenset({"w1", "w2", "cls_w"})


@dataclass(eq=False)
class HeadParams:
    """Weights of the gate MLP and the classifier layer, float64."""

    w1: np.ndarray  # (dim, h)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h, dim)
    b2: np.ndarray  # (dim,)
    cls_w: np.ndarray  # (dim, n_classes)
    cls_b: np.ndarray  # (n_classes,)

    @property
    def dim(self) -> int:
        return self.w1.shape[0]

    @property
    def h(self) -> int:
        return self.w1.shape[1]

    @property
    def n_classes(self) -> int:
        return self.cls_w.shape[1]

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _PARAM_NAMES}

    def copy(self) -> "HeadParams":
        return HeadParams(**{k: v.copy() for k, v in self.as_dict().items()})


@dataclass
class TrainConfig:
    n_max: int = 1200
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    batch_size: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    n_mine: int = 30
    delta: float = 1.2
    n_hard: int = 1
    hidden: Optional[int] = None  # gate MLP width, defaults to dim // 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_max < 0:
            raise ConfigError(f"training.n_max must be >= 0, got {self.n_max}")
        if not 0 < self.lr_min <= self.lr_max:
            raise ConfigError("training requires 0 < lr_min <= lr_max")
        if self.batch_size < 1:
            raise ConfigError("training.batch_size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("training.beta1/beta2 must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("training.eps must be > 0 and weight_decay >= 0")
        if self.n_mine < 1:
            raise ConfigError(f"training.n_mine must be >= 1, got {self.n_mine}")
        if self.delta <= 0:
            raise ConfigError(f"training.delta must be > 0, got {self.delta}")
        if self.n_hard < 0:
            raise ConfigError(f"training.n_hard must be >= 0, got {self.n_hard}")
        if self.hidden is not None and self.hidden < 1:
            raise ConfigError("training.hidden must be >= 1 when set")


@dataclass
class OptimizerState:
    """Per-parameter first/second moments plus the shared step counter."""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def initial(cls, params: HeadParams) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.as_dict().items()},
            v={k: np.zeros_like(p) for k, p in params.as_dict().items()},
        )


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    mean_loss: float
    balanced_accuracy: float
    n_hard_mined: int


@dataclass
class TrainResult:
    params: HeadParams
    metrics: List[EpochMetrics]


def init_params(
    dim: int, n_classes: int, hidden: Optional[int] = None, seed: int = 0
) -> HeadParams:
    """Fan-in-scaled uniform weights, zero biases, seeded."""
    if dim < 1 or n_classes < 2:
        raise ConfigError(f"need dim >= 1 and n_classes >= 2, got {dim}/{n_classes}")
    h = hidden if hidden is not None else max(1, dim // 2)
    rng = np.random.default_rng([seed, _INIT_DOMAIN])

    def uniform(fan_in: int, shape) -> np.ndarray:
        limit = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-limit, limit, size=shape)

    return HeadParams(
        w1=uniform(dim, (dim, h)),
        b1=np.zeros(h),
        w2=uniform(h, (h, dim)),
        b2=np.zeros(dim),
        cls_w=uniform(dim, (dim, n_classes)),
        cls_b=np.zeros(n_classes),
    )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_parts(params: HeadParams, X: np.ndarray):
    z1 = X @ params.w1 + params.b1
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ params.w2 + params.b2
    gate = _sigmoid(z2)
    gated = gate * X
    logits = gated @ params.cls_w + params.cls_b
    return z1, h1, gate, gated, logits


def _as_batch(params: HeadParams, x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValidationError("input contains NaN or Inf")
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != params.dim:
        raise ValidationError(f"input dim {X.shape[1]} != params dim {params.dim}")
    return X, single


def forward(params: HeadParams, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Logits and the attention gate for one embedding or a batch of them."""
    X, single = _as_batch(params, x)
    _, _, gate, _, logits = _forward_parts(params, X)
    if single:
        return logits[0], gate[0]
    return logits, gate


def _log_softmax_parts(logits: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    shift = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shift)
    total = exp.sum(axis=1, keepdims=True)
    log_z = np.log(total) + logits.max(axis=1, keepdims=True)
    return exp / total, log_z[:, 0]


def _check_labels(y: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValidationError(f"labels outside [0, {n_classes})")
    return y


def loss_and_grad(
    params: HeadParams, X: np.ndarray, y: np.ndarray
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean softmax cross-entropy over the batch and its exact gradients."""
    X, _ = _as_batch(params, np.atleast_2d(X))
    if X.shape[0] == 0:
        raise ValidationError("batch must be non-empty")
    y = _check_labels(y, params.n_classes)
    z1, h1, gate, gated, logits = _forward_parts(params, X)
    probs, log_z = _log_softmax_parts(logits)
    n = X.shape[0]
    loss = float(np.mean(log_z - logits[np.arange(n), y]))

    d_logits = probs
    d_logits[np.arange(n), y] -= 1.0
    d_logits /= n
    d_cls_w = gated.T @ d_logits
    d_cls_b = d_logits.sum(axis=0)
    d_gated = d_logits @ params.cls_w.T
    d_z2 = d_gated * X * gate * (1.0 - gate)
    d_w2 = h1.T @ d_z2
    d_b2 = d_z2.sum(axis=0)
    d_h1 = d_z2 @ params.w2.T
    d_z1 = d_h1 * (z1 > 0)
    d_w1 = X.T @ d_z1
    d_b1 = d_z1.sum(axis=0)
    grads = {
        "w1": d_w1, "b1": d_b1,
        "w2": d_w2, "b2": d_b2,
        "cls_w": d_cls_w, "cls_b": d_cls_b,
    }
    return loss, grads


def per_sample_losses(params: HeadParams, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Cross-entropy of each row under frozen parameters."""
    X, _ = _as_batch(params, np.atleast_2d(X))
    y = _check_labels(y, params.n_classes)
    _, _, _, _, logits = _forward_parts(params, X)
    _, log_z = _log_softmax_parts(logits)
    return log_z - logits[np.arange(X.shape[0]), y]


def optimizer_step(
    params: HeadParams,
    grads: Dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    config: TrainConfig,
) -> Tuple[HeadParams, OptimizerState]:
    """One bias-corrected adaptive-moment update with decoupled decay.

    Decay scales the weight matrices by (1 - lr * weight_decay) before the
    moment update lands; biases are never decayed. Updates in place.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - config.beta1 ** t
    bc2 = 1.0 - config.beta2 ** t
    for name, p in params.as_dict().items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        if name in _DECAYED and config.weight_decay:
            p *= 1.0 - lr * config.weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
    return params, state


def cosine_lr(epoch: int, config: TrainConfig) -> float:
    """Cosine annealing from lr_max (epoch 0) down to lr_min (epoch n_max)."""
    if config.n_max <= 0 or epoch <= 0:
        return config.lr_max
    if epoch >= config.n_max:
        return config.lr_min
    span = config.lr_max - config.lr_min
    return config.lr_min + 0.5 * span * (1.0 + math.cos(math.pi * epoch / config.n_max))


def hard_indices(losses: np.ndarray, delta: float) -> np.ndarray:
    """Indices whose loss strictly exceeds delta times the mean loss."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ValidationError("loss vector must be non-empty")
    return np.flatnonzero(losses > delta * losses.mean())


def mine_hard_samples(
    params: HeadParams, calibrated: CalibratedSet, delta: float
) -> np.ndarray:
    """Hard-sample indices over the full training set under frozen params."""
    losses = per_sample_losses(
        params, calibrated.features.astype(np.float64), calibrated.labels
    )
    return hard_indices(losses, delta)


def _epoch_pass(
    params: HeadParams,
    state: OptimizerState,
    X: np.ndarray,
    y: np.ndarray,
    order: np.ndarray,
    lr: float,
    config: TrainConfig,
) -> float:
    total = 0.0
    for start in range(0, order.size, config.batch_size):
        batch = order[start : start + config.batch_size]
        loss, grads = loss_and_grad(params, X[batch], y[batch])
        optimizer_step(params, grads, state, lr, config)
        total += loss * batch.size
    return total / order.size


def train(calibrated: CalibratedSet, config: TrainConfig) -> TrainResult:
    """Train the head on a calibrated set; deterministic given config.seed.

    Runs n_max shuffled epochs. At epochs that are multiples of n_mine the
    hard set is mined and, when non-empty, trained for n_hard extra epochs
    at the current learning rate (the cosine schedule only advances with
    the main loop).
    """
    if calibrated.n == 0:
        raise ConfigError("calibrated set is empty")
    if calibrated.n_classes < 2:
        raise ConfigError("training needs at least 2 classes")
    from .evaluate import balanced_accuracy  # deferred: evaluate imports this module

    X = calibrated.features.astype(np.float64)
    y = calibrated.labels
    params = init_params(calibrated.dim, calibrated.n_classes, config.hidden, config.seed)
    state = OptimizerState.initial(params)
    shuffle_rng = np.random.default_rng([config.seed, _SHUFFLE_DOMAIN])
    metrics: List[EpochMetrics] = []
    for epoch in range(1, config.n_max + 1):
        lr = cosine_lr(epoch - 1, config)
        order = shuffle_rng.permutation(calibrated.n)
        mean_loss = _epoch_pass(params, state, X, y, order, lr, config)
        logits, _ = forward(params, X)
        preds = np.argmax(logits, axis=1)
        bal_acc = balanced_accuracy(preds, y, calibrated.n_classes)
        mined = 0
        if epoch % config.n_mine == 0:
            hard = mine_hard_samples(params, calibrated, config.delta)
            mined = int(hard.size)
            if mined:
                for _ in range(config.n_hard):
                    hard_order = hard[shuffle_rng.permutation(hard.size)]
                    _epoch_pass(params, state, X, y, hard_order, lr, config)
        metrics.append(EpochMetrics(epoch, lr, mean_loss, bal_acc, mined))
    return TrainResult(params=params, metrics=metrics)


def metrics_csv(metrics: List[EpochMetrics]) -> str:
    lines = ["epoch,lr,mean_loss,balanced_accuracy,n_hard_mined"]
    for m in metrics:
        lines.append(
            f"{m.epoch},{m.lr!r},{m.mean_loss!r},{m.balanced_accuracy!r},{m.n_hard_mined}"
        )
    return "\n".join(lines) + "\n"


def save_params(params: HeadParams, path: Union[str, Path]) -> None:
    """Serialize to DARCH1 (header plus the six arrays as f32 LE)."""
    path = Path(path)
    parts = [
        PARAMS_MAGIC,
        struct.pack("<IIII", PARAMS_VERSION, params.dim, params.h, params.n_classes),
    ]
    for name in _PARAM_NAMES:
        parts.append(np.ascontiguousarray(getattr(params, name)).astype("<f4").tobytes())
    path.write_bytes(b"".join(parts))


def load_params(path: Union[str, Path]) -> HeadParams:
    path = Path(path)
    blob = path.read_bytes()
    head_size = len(PARAMS_MAGIC) + 16
    if len(blob) < head_size:
        raise LengthError(f"{path}: file shorter than the DARCH1 header")
    if blob[: len(PARAMS_MAGIC)] != PARAMS_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:len(PARAMS_MAGIC)]!r}")
    version, dim, h, n_classes = struct.unpack_from("<IIII", blob, len(PARAMS_MAGIC))
    if version != PARAMS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    shapes = {
        "w1": (dim, h), "b1": (h,),
        "w2": (h, dim), "b2": (dim,),
        "cls_w": (dim, n_classes), "cls_b": (n_classes,),
    }
    expected = head_size + sum(int(np.prod(s)) * 4 for s in shapes.values())
    if len(blob) != expected:
        raise LengthError(f"{path}: payload is {len(blob)} bytes, header implies {expected}")
    offset = head_size
    arrays = {}
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        arrays[name] = (
            np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            .astype(np.float64)
            .reshape(shape)
        )
        offset += count * 4
    return HeadParams(**arrays)
