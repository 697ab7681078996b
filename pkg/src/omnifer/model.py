"""Classifier, cross-entropy objective and SGD-with-momentum training."""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import LabeledDataset

CHECKPOINT_MAGIC = b"ODMP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    kind: str = "mlp"
    input_shape: tuple[int, int, int] = (8, 8, 1)
    hidden_widths: tuple[int, ...] = (32,)
    num_classes: int = 3
    conv_filters: int = 4

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "hidden_widths", tuple(int(v) for v in self.hidden_widths))
        if self.kind not in ("mlp", "tiny-conv"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if len(self.input_shape) != 3:
            raise ValueError("input_shape must be (H, W, C)")
        if not self.hidden_widths:
            raise ValueError("at least one hidden layer is required")
        if self.num_classes < 2 or self.feature_dim < self.num_classes:
            raise ValueError("need feature_dim >= num_classes >= 2")
        if self.kind == "tiny-conv" and (self.input_shape[0] % 2 or self.input_shape[1] % 2):
            raise ValueError("tiny-conv needs even input height and width")

    @property
    def feature_dim(self) -> int:
        return self.hidden_widths[-1]

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter shapes in declaration order; ``w``/``b`` are the classifier."""
        h, w, c = self.input_shape
        shapes: dict[str, tuple[int, ...]] = {}
        if self.kind == "tiny-conv":
            shapes["conv_k"] = (9 * c, self.conv_filters)
            shapes["conv_b"] = (self.conv_filters,)
            fan_in = (h // 2) * (w // 2) * self.conv_filters
        else:
            fan_in = h * w * c
        for i, width in enumerate(self.hidden_widths):
            shapes[f"W{i}"] = (fan_in, width)
            shapes[f"b{i}"] = (width,)
            fan_in = width
        shapes["w"] = (self.num_classes, self.feature_dim)
        shapes["b"] = (self.num_classes,)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["hidden_widths"] = list(self.hidden_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**d)


@dataclass
class ModelParams:
    arch: Architecture
    tensors: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.momentum:
            self.momentum = {k: np.zeros_like(v) for k, v in self.tensors.items()}

    @property
    def theta(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k not in ("w", "b")}

    @property
    def w(self) -> np.ndarray:
        return self.tensors["w"]

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()},
                           {k: v.copy() for k, v in self.momentum.items()})


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    epochs: int = 25
    batch_size: int = 32
    lr_decay: float = 0.1
    lr_decay_every: int = 10
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must be in [0, 1]")


@dataclass
class TrainResult:
    params: ModelParams
    losses: list[float]
    epoch_seconds: list[float]


def init_params(arch: Architecture, seed: int) -> ModelParams:
    """He-normal weights (variance 2/fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in arch.layer_shapes().items():
        if len(shape) == 1:
            tensors[name] = np.zeros(shape, dtype=np.float32)
            continue
        fan_in = shape[1] if name == "w" else shape[0]
        tensors[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
    return ModelParams(arch, tensors)


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _im2col_matrix(h: int, w: int, c: int) -> np.ndarray:
    """0/1 matrix mapping a flattened (H, W, C) image to its 3x3 'same' patches."""
    g = np.zeros((h * w * c, h * w * 9 * c), dtype=np.float32)
    col = 0
    for i in range(h):
        for j in range(w):
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    for ch in range(c):
                        y, x = i + di, j + dj
                        if 0 <= y < h and 0 <= x < w:
                            g[(y * w + x) * c + ch, col] = 1.0
                        col += 1
    return g


def build_forward(arch: Architecture, p: dict[str, ad.Node], x: ad.Node) -> tuple[ad.Node, ad.Node]:
    """Graph nodes for (features, logits) of a (batch, H, W, C) input node."""
    h, w, c = arch.input_shape
    if arch.kind == "tiny-conv":
        patches = ad.reshape(x, (-1, h * w * c)) @ ad.constant(_im2col_matrix(h, w, c))
        conv = ad.reshape(patches, (-1, 9 * c)) @ p["conv_k"] + p["conv_b"]
        conv = ad.reshape(ad.relu(conv), (-1, h, w, arch.conv_filters))
        act = ad.reshape(ad.mean_pool(conv, 2), (-1, (h // 2) * (w // 2) * arch.conv_filters))
    else:
        act = ad.reshape(x, (-1, h * w * c))
    for i in range(len(arch.hidden_widths)):
        act = ad.relu(act @ p[f"W{i}"] + p[f"b{i}"])
    logits = act @ ad.transpose(p["w"]) + p["b"]
    return act, logits


def param_variables(arch: Architecture, prefix: str = "") -> dict[str, ad.Node]:
    return {name: ad.variable(prefix + name) for name in arch.layer_shapes()}


@lru_cache(maxsize=None)
def _forward_graph(arch: Architecture) -> ad.Graph:
    p = param_variables(arch)
    feats, logits = build_forward(arch, p, ad.variable("x"))
    return ad.Graph([feats, logits, ad.softmax(logits)])


@lru_cache(maxsize=None)
def _train_graph(arch: Architecture) -> ad.Graph:
    p = param_variables(arch)
    _, logits = build_forward(arch, p, ad.variable("x"))
    loss = ad.softmax_cross_entropy(logits, ad.variable("y"))
    grads = ad.gradient(loss, list(p.values()))
    return ad.Graph([loss, *grads])


def _check_input(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if tuple(x.shape[1:]) != params.arch.input_shape:
        raise ad.ShapeError(f"input shape {x.shape[1:]} does not match architecture {params.arch.input_shape}")
    return x


def _bindings(params: ModelParams, **extra) -> dict:
    b = dict(params.tensors)
    b.update(extra)
    return b


def _inference(params: ModelParams, x: np.ndarray, dtype, slot: int) -> np.ndarray:
    # BLAS picks different kernels for different batch sizes, so float32
    # results would depend on the batch a row sits in; accumulating in float64
    # and rounding once makes each row independent of its neighbours
    x = _check_input(params, x)
    out = _forward_graph(params.arch).run(_bindings(params, x=x), dtype=dtype or np.float64)[slot]
    return out if dtype is not None else out.astype(ad.get_default_dtype())


def forward_features(params: ModelParams, x: np.ndarray, dtype=None) -> np.ndarray:
    """Penultimate-layer activations, shape (batch, feature_dim)."""
    return _inference(params, x, dtype, 0)


def logits(params: ModelParams, x: np.ndarray, dtype=None) -> np.ndarray:
    return _inference(params, x, dtype, 1)


def class_confidence(params: ModelParams, x: np.ndarray, dtype=None) -> np.ndarray:
    """Softmax over the classifier outputs, one row per sample."""
    return _inference(params, x, dtype, 2)


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    # np.argmax picks the lowest index on ties
    return np.argmax(logits(params, x), axis=1)


def loss_and_grads(params: ModelParams, x: np.ndarray, y: np.ndarray, dtype=None):
    """Mean cross-entropy of a batch and its gradient for every parameter."""
    x = _check_input(params, x)
    out = _train_graph(params.arch).run(_bindings(params, x=x, y=np.asarray(y, dtype=np.int64)), dtype=dtype)
    return float(out[0]), dict(zip(params.arch.layer_shapes(), out[1:]))


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

def sgd_momentum_step(params: ModelParams, grads: dict[str, np.ndarray], lr: float,
                      momentum: float) -> ModelParams:
    """buffer <- momentum * buffer + grad; param <- param - lr * buffer."""
    tensors, buffers = {}, {}
    for name, value in params.tensors.items():
        g = np.asarray(grads[name])
        if g.shape != value.shape:
            raise ad.ShapeError(f"gradient for {name} has shape {g.shape}, expected {value.shape}")
        buf = params.momentum[name] * value.dtype.type(momentum) + g.astype(value.dtype)
        buffers[name] = buf
        tensors[name] = value - value.dtype.type(lr) * buf
    return ModelParams(params.arch, tensors, buffers)


def lr_schedule(epoch: int, base_lr: float = 0.001, decay: float = 0.1, every: int = 10) -> float:
    """Step decay applied at epoch boundaries every, 2*every, ..."""
    return base_lr * decay ** (epoch // every)


def augment_flip(x: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    """Horizontally flip each image with probability ``prob``.

    Accepts one (H, W, C) image or a (N, H, W, C) batch.
    """
    x = np.asarray(x)
    if x.ndim == 3:
        return x[:, ::-1].copy() if rng.random() < prob else x.copy()
    flips = rng.random(len(x)) < prob
    out = x.copy()
    out[flips] = x[flips][:, :, ::-1]
    return out


def train_classifier(params: ModelParams, data: LabeledDataset, cfg: TrainConfig,
                     on_epoch: Callable[[int, ModelParams], None] | None = None) -> TrainResult:
    if len(data) == 0:
        raise ValueError("empty training set")
    if data.labels.min() < 0 or data.labels.max() >= params.arch.num_classes:
        raise ValueError("label out of range for this architecture")
    _check_input(params, data.images[:1])
    graph = _train_graph(params.arch)
    names = list(params.arch.layer_shapes())
    losses, seconds = [], []
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(data))
        lr = lr_schedule(epoch, cfg.learning_rate, cfg.lr_decay, cfg.lr_decay_every)
        total, count = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            xb = augment_flip(data.images[idx], cfg.flip_prob, rng) if cfg.flip_prob > 0 else data.images[idx]
            out = graph.run(_bindings(params, x=xb, y=data.labels[idx]))
            params = sgd_momentum_step(params, dict(zip(names, out[1:])), lr, cfg.momentum)
            total += float(out[0]) * len(idx)
            count += len(idx)
        losses.append(total / count)
        seconds.append(time.perf_counter() - start)
        if on_epoch is not None:
            on_epoch(epoch, params)
    return TrainResult(params, losses, seconds)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, path, config_hash: str = "") -> None:
    descriptor = json.dumps({"arch": params.arch.to_dict(), "config_hash": config_hash},
                            sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(descriptor)), descriptor]
    for name in params.arch.layer_shapes():
        parts.append(params.tensors[name].astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[ModelParams, str]:
    """Returns the parameters (fresh momentum) and the embedded config hash."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an ODMP checkpoint")
    version, dlen = struct.unpack_from("<HI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 10
    meta = json.loads(raw[off:off + dlen])
    off += dlen
    arch = Architecture.from_dict(meta["arch"])
    tensors = {}
    for name, shape in arch.layer_shapes().items():
        count = int(np.prod(shape))
        if off + 4 * count > len(raw):
            raise ValueError(f"{path}: truncated at layer {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        off += 4 * count
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return ModelParams(arch, tensors), meta.get("config_hash", "")
