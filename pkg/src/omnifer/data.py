"""Datasets, synthetic generators, splits and the ODIM image container."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

ODIM_MAGIC = b"ODIM"
ODIM_VERSION = 1
_ODIM_HEADER = struct.Struct("<4sHHHIHHB")


class DatasetFormatError(ValueError):
    pass


class CorruptHeader(DatasetFormatError):
    pass


class TruncatedPayload(DatasetFormatError):
    pass


class HeaderMismatch(DatasetFormatError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    name: str = ""
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")
        if not self.class_names:
            self.class_names = [str(k) for k in range(self.num_classes)]

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, images=self.images[idx], labels=self.labels[idx])


@dataclass
class UnlabeledPool:
    images: np.ndarray
    source_ids: np.ndarray = None
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got {self.images.shape}")
        if self.source_ids is None:
            self.source_ids = np.arange(len(self.images), dtype=np.int64)
        self.source_ids = np.asarray(self.source_ids, dtype=np.int64)

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


def concat(a: LabeledDataset, b: LabeledDataset, name: str = "") -> LabeledDataset:
    if a.image_shape != b.image_shape:
        raise ValueError(f"image shapes differ: {a.image_shape} vs {b.image_shape}")
    if a.num_classes != b.num_classes:
        raise ValueError("class counts differ")
    return LabeledDataset(np.concatenate([a.images, b.images]),
                          np.concatenate([a.labels, b.labels]),
                          a.num_classes, name or a.name, list(a.class_names))


# ---------------------------------------------------------------------------
# ODIM files
# ---------------------------------------------------------------------------

def _quantize(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_dataset(dataset: LabeledDataset | UnlabeledPool, path) -> None:
    """Write a dataset as ODIM; pixels are stored as u8 (value * 255)."""
    labeled = isinstance(dataset, LabeledDataset)
    n, h, w, c = dataset.images.shape
    m = dataset.num_classes if labeled else 0
    header = _ODIM_HEADER.pack(ODIM_MAGIC, ODIM_VERSION, 1 if labeled else 0, m, n, h, w, c)
    payload = _quantize(dataset.images).tobytes()
    parts = [header, payload]
    if labeled:
        parts.append(dataset.labels.astype("<u2").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path) -> LabeledDataset | UnlabeledPool:
    """Read an ODIM file.  Pixels come back as float32 in [0, 1]."""
    raw = Path(path).read_bytes()
    if len(raw) < _ODIM_HEADER.size:
        raise CorruptHeader(f"{path}: file shorter than the header")
    magic, version, flags, m, n, h, w, c = _ODIM_HEADER.unpack_from(raw)
    if magic != ODIM_MAGIC:
        raise CorruptHeader(f"{path}: bad magic {magic!r}")
    if version != ODIM_VERSION:
        raise CorruptHeader(f"{path}: unsupported version {version}")
    if flags & ~1 or min(h, w, c) == 0:
        raise CorruptHeader(f"{path}: invalid header fields")
    labeled = bool(flags & 1)
    npix = n * h * w * c
    expected = _ODIM_HEADER.size + npix + (2 * n if labeled else 0)
    if len(raw) < expected:
        raise TruncatedPayload(f"{path}: expected {expected} bytes, found {len(raw)}")
    if len(raw) > expected:
        raise HeaderMismatch(f"{path}: {len(raw) - expected} trailing bytes beyond the declared payload")
    off = _ODIM_HEADER.size
    pixels = np.frombuffer(raw, dtype=np.uint8, count=npix, offset=off).reshape(n, h, w, c)
    images = pixels.astype(np.float32) / np.float32(255.0)
    name = Path(path).stem
    if not labeled:
        return UnlabeledPool(images, name=name)
    if m < 2:
        raise CorruptHeader(f"{path}: labeled file declares {m} classes")
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=off + npix).astype(np.int64)
    if n and labels.max() >= m:
        raise HeaderMismatch(f"{path}: label {labels.max()} >= declared class count {m}")
    return LabeledDataset(images, labels, m, name=name)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

GENERATORS = ("gaussian-blobs", "bars-and-stripes", "shifted-domain")


@dataclass
class SyntheticSpec:
    kind: str = "gaussian-blobs"
    num_classes: int = 3
    per_class: int = 200
    test_per_class: int = 0
    image_size: int = 8
    channels: int = 1
    noise: float = 0.1
    pool_size: int = 0
    shifted_test_per_class: int = 0
    brightness: float = 0.0
    shift_noise: float = 0.0
    rotation: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in GENERATORS:
            raise ValueError(f"unknown generator {self.kind!r}; expected one of {GENERATORS}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    @classmethod
    def from_text(cls, text: str) -> "SyntheticSpec":
        """Parse a flat ``key = value`` file; ``#`` starts a comment."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in known:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            ftype = known[key].type
            kwargs[key] = value if ftype == "str" else (int(value) if ftype == "int" else float(value))
        return cls(**kwargs)


@dataclass
class SyntheticDraw:
    anchor: LabeledDataset
    test: LabeledDataset | None
    pool: UnlabeledPool | None
    shifted_test: LabeledDataset | None
    pool_truth: np.ndarray | None  # diagnostics only, never used by selection


def _templates(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    s, c, m = spec.image_size, spec.channels, spec.num_classes
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    out = np.zeros((m, s, s, c))
    if spec.kind in ("gaussian-blobs", "shifted-domain"):
        # two bumps per class, mirrored so horizontal flips preserve the class
        width = max(s / 6.0, 0.8)
        for k in range(m):
            for ch in range(c):
                for _ in range(2):
                    cy, cx = rng.uniform(0, s - 1, size=2)
                    for x0 in (cx, s - 1 - cx):
                        out[k, :, :, ch] += np.exp(-((yy - cy) ** 2 + (xx - x0) ** 2) / (2 * width ** 2))
        out /= out.max(axis=(1, 2, 3), keepdims=True)
        return 0.15 + 0.7 * out
    # bars-and-stripes: class k lights a fixed random subset of rows and
    # mirror-symmetric columns
    for k in range(m):
        rows = rng.random(s) < 0.3
        cols = rng.random(s) < 0.3
        cols = cols | cols[::-1]
        img = np.maximum(rows[:, None], cols[None, :]).astype(np.float64)
        out[k] = 0.2 + 0.6 * img[:, :, None]
    return out


def _draw(templates, labels, noise, rng):
    x = templates[labels] + rng.normal(0.0, noise, size=(len(labels),) + templates.shape[1:])
    return x


def _shift(x, spec: SyntheticSpec, rng):
    if spec.rotation:
        angles = rng.uniform(-spec.rotation, spec.rotation, size=len(x))
        x = np.stack([ndimage.rotate(img, a, axes=(0, 1), reshape=False, order=1, mode="nearest")
                      for img, a in zip(x, angles)])
    if spec.shift_noise:
        x = x + rng.normal(0.0, spec.shift_noise, size=x.shape)
    return x + spec.brightness


def _finish(x) -> np.ndarray:
    return (_quantize(x).astype(np.float32) / np.float32(255.0))


def make_synthetic(spec: SyntheticSpec) -> SyntheticDraw:
    """Draw an anchor set and, optionally, a domain-shifted unlabeled pool.

    All draws share one set of class templates fixed by ``spec.seed``.  The
    ``shifted-domain`` kind applies the shift transform to the anchor and
    test sets as well, which gives a target-domain dataset for cross-dataset
    evaluation.
    """
    root = np.random.default_rng(spec.seed)
    t_rng, a_rng, te_rng, p_rng, s_rng = (np.random.default_rng(s) for s in root.bit_generator.seed_seq.spawn(5))
    templates = _templates(spec, t_rng)
    m = spec.num_classes
    names = [f"class{k}" for k in range(m)]

    def labeled(count, rng, shifted, name):
        if count <= 0:
            return None
        labels = np.repeat(np.arange(m), count)
        rng.shuffle(labels)
        x = _draw(templates, labels, spec.noise, rng)
        if shifted:
            x = _shift(x, spec, rng)
        return LabeledDataset(_finish(x), labels, m, name, names)

    own_shift = spec.kind == "shifted-domain"
    anchor = labeled(spec.per_class, a_rng, own_shift, "anchor")
    test = labeled(spec.test_per_class, te_rng, own_shift, "test")
    pool = truth = None
    if spec.pool_size > 0:
        truth = p_rng.integers(0, m, size=spec.pool_size)
        x = _shift(_draw(templates, truth, spec.noise, p_rng), spec, p_rng)
        pool = UnlabeledPool(_finish(x), name="pool")
    shifted = labeled(spec.shifted_test_per_class, s_rng, True, "shifted-test")
    return SyntheticDraw(anchor, test, pool, shifted, truth)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def split(dataset: LabeledDataset, ratio=(5, 1), seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded train/test split at ``ratio`` = (train_parts, test_parts).

    Stratified by class whenever every class has at least ``sum(ratio)``
    samples, otherwise a plain shuffled split.
    """
    a, b = ratio
    if a < 0 or b < 0 or a + b <= 0:
        raise ValueError(f"invalid ratio {ratio}")
    if len(dataset) == 0:
        raise ValueError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    parts = a + b
    counts = dataset.class_counts()
    test_idx = []
    if counts.min() >= parts:
        for k in range(dataset.num_classes):
            members = np.flatnonzero(dataset.labels == k)
            members = members[rng.permutation(len(members))]
            test_idx.extend(members[: int(round(len(members) * b / parts))])
    else:
        order = rng.permutation(len(dataset))
        test_idx.extend(order[: int(round(len(dataset) * b / parts))])
    test_mask = np.zeros(len(dataset), dtype=bool)
    test_mask[np.asarray(test_idx, dtype=np.int64)] = True
    train = dataset.subset(np.flatnonzero(~test_mask))
    test = dataset.subset(np.flatnonzero(test_mask))
    return train, test
