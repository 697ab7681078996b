"""Dataset distillation: learn a handful of synthetic images and a step size.

One outer iteration samples ``J`` fresh initial weight draws, takes one
plain SGD step on the synthetic images from each draw, measures the loss of
the stepped weights on a batch of real (pseudo-labelled) samples and
back-propagates that loss through the SGD step into the images and into the
step size.  The step size is stored as ``log_eta`` so it stays positive.
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .model import Architecture, ModelParams, build_forward, init_params

log = logging.getLogger(__name__)

ODDS_MAGIC = b"ODDS"
ODDS_VERSION = 1


class DivergenceError(RuntimeError):
    pass


class MissingClassError(ValueError):
    pass


@dataclass
class DistillConfig:
    n: int | None = None          # distilled images; None means one per class
    eta0: float = 0.01
    alpha: float = 0.01
    batch_size: int = 64
    iters: int = 1000
    weight_draws: int = 4
    inner_steps: int = 1
    snapshot_every: int = 0
    divergence_factor: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.eta0 <= 0 or self.alpha <= 0:
            raise ValueError("eta0 and alpha must be positive")
        if self.iters < 0 or self.weight_draws < 1 or self.inner_steps < 1 or self.batch_size < 1:
            raise ValueError("iters >= 0, weight_draws >= 1, inner_steps >= 1, batch_size >= 1 required")


@dataclass
class DistilledSet:
    x_tilde: np.ndarray
    labels: np.ndarray
    log_eta: float
    config_hash: str = ""
    iteration: int = 0

    @property
    def eta(self) -> float:
        return math.exp(self.log_eta)

    @property
    def n(self) -> int:
        return len(self.labels)

    def copy(self) -> "DistilledSet":
        return replace(self, x_tilde=self.x_tilde.copy(), labels=self.labels.copy())


@dataclass
class DistillResult:
    distilled: DistilledSet
    losses: list[float]
    snapshots: list[DistilledSet] = field(default_factory=list)


# ---------------------------------------------------------------------------
# learners
# ---------------------------------------------------------------------------

class ClassifierLearner:
    """Adapts an :class:`Architecture` to the distillation loop."""

    def __init__(self, arch: Architecture):
        self.arch = arch
        self.names = list(arch.layer_shapes())
        self.num_classes = arch.num_classes
        self.sample_shape = arch.input_shape

    def loss(self, p: dict[str, ad.Node], x: ad.Node, y: ad.Node) -> ad.Node:
        _, logits = build_forward(self.arch, p, x)
        return ad.softmax_cross_entropy(logits, y)

    def sample(self, seed: int) -> dict[str, np.ndarray]:
        return init_params(self.arch, seed).tensors

    def __hash__(self):
        return hash(("classifier", self.arch))

    def __eq__(self, other):
        return isinstance(other, ClassifierLearner) and other.arch == self.arch


def as_learner(model) -> ClassifierLearner:
    return ClassifierLearner(model) if isinstance(model, Architecture) else model


@dataclass(frozen=True)
class _MetaGraphs:
    meta: ad.Graph     # [outer loss, d/dx_tilde, d/deta]
    inner: ad.Graph    # stepped parameters
    outer: ad.Graph    # outer loss only


@lru_cache(maxsize=None)
def _meta_graphs(learner, inner_steps: int) -> _MetaGraphs:
    theta = {k: ad.variable("p0_" + k) for k in learner.names}
    xt, yt = ad.variable("xt"), ad.variable("yt")
    eta = ad.variable("eta")
    for _ in range(inner_steps):
        inner_loss = learner.loss(theta, xt, yt)
        grads = ad.gradient(inner_loss, list(theta.values()))
        theta = {k: v - eta * g for (k, v), g in zip(theta.items(), grads)}
    outer_loss = learner.loss(theta, ad.variable("xr"), ad.variable("yr"))
    gx, geta = ad.gradient(outer_loss, [xt, eta])
    return _MetaGraphs(ad.Graph([outer_loss, gx, geta]), ad.Graph(list(theta.values())),
                       ad.Graph([outer_loss]))


def _bind(theta0: dict, x_tilde, labels, eta, xr=None, yr=None) -> dict:
    b = {"p0_" + k: v for k, v in theta0.items()}
    b.update(xt=x_tilde, yt=np.asarray(labels, dtype=np.int64), eta=np.asarray(eta))
    if xr is not None:
        b.update(xr=xr, yr=np.asarray(yr, dtype=np.int64))
    return b


def _tensors(theta) -> dict[str, np.ndarray]:
    return theta.tensors if isinstance(theta, ModelParams) else theta


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def init_distilled(cfg: DistillConfig, model, pixel_range=(0.0, 1.0)) -> DistilledSet:
    """Gaussian-noise images centred in ``pixel_range``, labels round-robin over classes."""
    learner = as_learner(model)
    m = learner.num_classes
    n = m if cfg.n is None else cfg.n
    if n < m:
        raise ValueError(f"need at least one distilled image per class (n={n} < m={m})")
    lo, hi = pixel_range
    rng = np.random.default_rng([cfg.seed, 0])
    z = rng.standard_normal((n, *learner.sample_shape))
    x = (lo + hi) / 2 + (hi - lo) / 4 * z
    return DistilledSet(x.astype(np.float32), np.arange(n, dtype=np.int64) % m, math.log(cfg.eta0))


def inner_step(theta0, distilled: DistilledSet, model=None, inner_steps: int = 1, dtype=None):
    """Parameters after SGD step(s) of size eta on the distilled set, no momentum."""
    if isinstance(theta0, ModelParams):
        model = model or theta0.arch
    learner = as_learner(model)
    graphs = _meta_graphs(learner, inner_steps)
    out = graphs.inner.run(_bind(_tensors(theta0), distilled.x_tilde, distilled.labels, distilled.eta),
                           dtype=dtype)
    stepped = dict(zip(learner.names, out))
    if isinstance(theta0, ModelParams):
        return ModelParams(theta0.arch, stepped)
    return stepped


def outer_loss(theta1, real_x: np.ndarray, real_y: np.ndarray, model=None, dtype=None) -> float:
    """Loss of stepped parameters on a real batch."""
    if len(real_x) == 0:
        raise ValueError("empty real batch")
    if isinstance(theta1, ModelParams):
        model = model or theta1.arch
    learner = as_learner(model)
    p = {k: ad.variable(k) for k in learner.names}
    node = learner.loss(p, ad.variable("x"), ad.variable("y"))
    b = dict(_tensors(theta1))
    b.update(x=real_x, y=np.asarray(real_y, dtype=np.int64))
    return float(ad.evaluate(node, b, dtype=dtype))


def meta_gradients(theta0, distilled: DistilledSet, real_x, real_y, model=None,
                   inner_steps: int = 1, dtype=None) -> tuple[float, np.ndarray, float]:
    """(outer loss, d loss/d x_tilde, d loss/d eta) for one initial weight draw."""
    if isinstance(theta0, ModelParams):
        model = model or theta0.arch
    graphs = _meta_graphs(as_learner(model), inner_steps)
    loss, gx, geta = graphs.meta.run(
        _bind(_tensors(theta0), distilled.x_tilde, distilled.labels, distilled.eta, real_x, real_y),
        dtype=dtype)
    return float(loss), gx, float(geta)


class _BatchStream:
    """Real batches cycling through the auxiliary set, reshuffled every pass."""

    def __init__(self, size: int, batch: int, seed: int):
        self.size, self.batch, self.seed = size, batch, seed
        self._perms: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            self._perms = {epoch: np.random.default_rng([self.seed, 1, epoch]).permutation(self.size)}
        return self._perms[epoch]

    def indices(self, t: int) -> np.ndarray:
        out = []
        for pos in range(t * self.batch, (t + 1) * self.batch):
            out.append(self._perm(pos // self.size)[pos % self.size])
        return np.asarray(out, dtype=np.int64)


def _weight_seeds(seed: int, t: int, draws: int) -> list[int]:
    rng = np.random.default_rng([seed, 2, t])
    return [int(s) for s in rng.integers(0, 2**63 - 1, size=draws)]


def distill(aux_x: np.ndarray, aux_y: np.ndarray, model, cfg: DistillConfig,
            start: DistilledSet | None = None, config_hash: str = "",
            on_snapshot: Callable[[DistilledSet], None] | None = None) -> DistillResult:
    """Run the bilevel distillation loop.

    ``aux_x``/``aux_y`` are the auxiliary (pseudo-labelled) samples.  Passing
    a snapshot as ``start`` resumes from its iteration count; seeds for the
    weight draws and batch order depend only on ``(cfg.seed, t)``, so a
    resumed run reproduces the uninterrupted one.
    """
    learner = as_learner(model)
    aux_x = np.asarray(aux_x, dtype=np.float32)
    aux_y = np.asarray(aux_y, dtype=np.int64)
    if len(aux_y) == 0:
        raise ValueError("auxiliary dataset is empty")
    current = (start or init_distilled(cfg, learner)).copy()
    current.config_hash = config_hash or current.config_hash
    missing = sorted(set(current.labels.tolist()) - set(aux_y.tolist()))
    if missing:
        raise MissingClassError(f"auxiliary data has no samples of class(es) {missing}")
    labels_before = current.labels.copy()
    graphs = _meta_graphs(learner, cfg.inner_steps)
    stream = _BatchStream(len(aux_y), cfg.batch_size, cfg.seed)
    losses: list[float] = []
    snapshots: list[DistilledSet] = []
    reference = None
    alpha = np.float32(cfg.alpha)
    for t in range(current.iteration, cfg.iters):
        idx = stream.indices(t)
        xr, yr = aux_x[idx], aux_y[idx]
        eta = current.eta
        total_loss, gx_sum, geta_sum = 0.0, np.zeros_like(current.x_tilde), 0.0
        try:
            for s in _weight_seeds(cfg.seed, t, cfg.weight_draws):
                loss, gx, geta = graphs.meta.run(
                    _bind(learner.sample(s), current.x_tilde, current.labels, np.float32(eta), xr, yr))
                total_loss += float(loss)
                gx_sum += gx
                geta_sum += float(geta)
        except ad.NonFiniteError as exc:
            raise DivergenceError(f"non-finite meta-gradient at iteration {t}: {exc}") from exc
        mean_loss = total_loss / cfg.weight_draws
        losses.append(mean_loss)
        if reference is None:
            reference = mean_loss
        elif mean_loss > cfg.divergence_factor * reference:
            raise DivergenceError(
                f"outer loss {mean_loss:.4g} at iteration {t} exceeds {cfg.divergence_factor:g}x "
                f"the initial {reference:.4g}; lower alpha or eta0")
        # log parameterisation: d/dlog_eta = eta * d/deta
        current.x_tilde = (current.x_tilde - alpha * gx_sum).astype(np.float32)
        current.log_eta = current.log_eta - cfg.alpha * eta * geta_sum
        # eta = exp(log_eta) must stay a positive normal float32
        if not (np.isfinite(current.x_tilde).all() and math.isfinite(current.log_eta)
                and -87.0 < current.log_eta < 88.0):
            raise DivergenceError(f"non-finite distilled state after iteration {t}")
        current.iteration = t + 1
        if cfg.snapshot_every and (current.iteration % cfg.snapshot_every == 0
                                   or current.iteration == cfg.iters):
            snap = current.copy()
            snapshots.append(snap)
            if on_snapshot is not None:
                on_snapshot(snap)
        if t % 200 == 0:
            log.debug("iter %d loss %.4f eta %.4g", t, mean_loss, current.eta)
    assert np.array_equal(labels_before, current.labels)
    return DistillResult(current, losses, snapshots)


def relative_error(a, b) -> float:
    """max|a - b| / max|b|, the normwise relative error used by the gradient checks."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(b).max(initial=0.0), np.abs(a).max(initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.abs(a - b).max() / scale)


def meta_gradient_check(distilled: DistilledSet, theta0, real_x, real_y, model=None,
                        eps: float = 1e-6, inner_steps: int = 1) -> dict[str, float]:
    """Compare engine meta-gradients with central differences of the full pipeline (float64)."""
    if isinstance(theta0, ModelParams):
        model = model or theta0.arch
    learner = as_learner(model)
    graphs = _meta_graphs(learner, inner_steps)
    theta = {k: np.asarray(v, dtype=np.float64) for k, v in _tensors(theta0).items()}
    x0 = np.asarray(distilled.x_tilde, dtype=np.float64)
    eta0 = distilled.eta

    def pipeline(x, eta):
        b = _bind(theta, x, distilled.labels, np.float64(eta), real_x, real_y)
        return float(graphs.outer.run(b, dtype=np.float64)[0])

    _, gx, geta = graphs.meta.run(_bind(theta, x0, distilled.labels, np.float64(eta0), real_x, real_y),
                                  dtype=np.float64)
    fd_x = ad.finite_diff(lambda x: pipeline(x, eta0), x0, eps)
    fd_eta = float(ad.finite_diff(lambda e: pipeline(x0, float(e)), np.array(eta0), eps))
    err_x = relative_error(gx, fd_x)
    err_eta = relative_error(geta, fd_eta)
    return {"x_tilde": err_x, "eta": err_eta, "max": max(err_x, err_eta)}


# ---------------------------------------------------------------------------
# ODDS files
# ---------------------------------------------------------------------------

def save_distilled(ds: DistilledSet, path) -> None:
    x = np.asarray(ds.x_tilde, dtype=np.float32)
    if x.ndim != 4:
        raise ValueError("only image-shaped distilled sets can be saved")
    n, h, w, c = x.shape
    hash_bytes = ds.config_hash.encode()
    parts = [
        ODDS_MAGIC,
        struct.pack("<HIHHB", ODDS_VERSION, n, h, w, c),
        ds.labels.astype("<u2").tobytes(),
        x.astype("<f4").tobytes(),
        struct.pack("<d", ds.log_eta),
        struct.pack("<H", len(hash_bytes)), hash_bytes,
        struct.pack("<I", ds.iteration),
    ]
    Path(path).write_bytes(b"".join(parts))


def load_distilled(path) -> DistilledSet:
    raw = Path(path).read_bytes()
    if raw[:4] != ODDS_MAGIC:
        raise ValueError(f"{path}: not an ODDS file")
    version, n, h, w, c = struct.unpack_from("<HIHHB", raw, 4)
    if version != ODDS_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 4 + struct.calcsize("<HIHHB")
    need = off + 2 * n + 4 * n * h * w * c + 8 + 2
    if len(raw) < need:
        raise ValueError(f"{path}: truncated")
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=off).astype(np.int64)
    off += 2 * n
    x = np.frombuffer(raw, dtype="<f4", count=n * h * w * c, offset=off).reshape(n, h, w, c).astype(np.float32)
    off += 4 * n * h * w * c
    (log_eta,) = struct.unpack_from("<d", raw, off)
    (hlen,) = struct.unpack_from("<H", raw, off + 8)
    off += 10
    config_hash = raw[off:off + hlen].decode()
    off += hlen
    (iteration,) = struct.unpack_from("<I", raw, off)
    return DistilledSet(x, labels, log_eta, config_hash, iteration)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
