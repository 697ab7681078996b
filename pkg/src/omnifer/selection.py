"""Feature-centroid pseudo-labelling of an unlabeled pool.

Anchor features define one centroid per class.  A pool sample is admitted
with label ``k`` when its cosine distance to centroid ``k`` beats the
distance to every other centroid by at least ``delta``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledDataset, UnlabeledPool
from .model import ModelParams, forward_features


class EmptyClass(ValueError):
    def __init__(self, k: int):
        super().__init__(f"class {k} has no anchor samples")
        self.k = k


class ZeroVector(ValueError):
    pass


@dataclass
class CentroidSet:
    centers: np.ndarray  # (m, D)
    counts: np.ndarray   # (m,)

    @property
    def num_classes(self) -> int:
        return len(self.counts)


@dataclass
class SelectionConfig:
    delta: float = 0.05
    per_class_cap: int | None = None
    distance_kind: str = field(default="cosine", init=False)

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if self.per_class_cap is not None and self.per_class_cap < 1:
            raise ValueError("per_class_cap must be a positive integer")


@dataclass
class AuxiliaryDataset:
    images: np.ndarray
    pseudo_labels: np.ndarray
    distances: np.ndarray
    source_ids: np.ndarray
    num_classes: int

    def __len__(self):
        return len(self.pseudo_labels)

    def sorted_by_class(self) -> dict[int, np.ndarray]:
        """Row indices per class, ascending by distance (ties by source id)."""
        out = {}
        for k in range(self.num_classes):
            rows = np.flatnonzero(self.pseudo_labels == k)
            order = np.lexsort((self.source_ids[rows], self.distances[rows]))
            out[k] = rows[order]
        return out

    def to_labeled(self, name: str = "aux") -> LabeledDataset:
        return LabeledDataset(self.images, self.pseudo_labels, self.num_classes, name)


def compute_centroids(features: np.ndarray, labels: np.ndarray, m: int) -> CentroidSet:
    """Per-class mean of feature rows.

    Rows are accumulated in sample order and divided by the class count.
    """
    features = np.asarray(features)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or len(features) != len(labels):
        raise ValueError("features must be (N, D) with one label per row")
    counts = np.bincount(labels, minlength=m)[:m]
    for k in range(m):
        if counts[k] == 0:
            raise EmptyClass(k)
    if labels.min() < 0 or labels.max() >= m:
        raise ValueError("label out of range")
    sums = np.zeros((m, features.shape[1]), dtype=features.dtype)
    np.add.at(sums, labels, features)
    return CentroidSet(sums / counts[:, None].astype(features.dtype), counts)


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cos(a, b), in [0, 2]."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVector("cosine distance undefined for a zero vector")
    return float(np.clip(1.0 - a.dot(b) / (na * nb), 0.0, 2.0))


def cosine_distance_matrix(features: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(N, m) matrix of cosine distances from each feature row to each centroid."""
    f = np.asarray(features, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64)
    if f.shape[1] != c.shape[1]:
        raise ValueError(f"feature dim {f.shape[1]} != centroid dim {c.shape[1]}")
    cn = np.linalg.norm(c, axis=1)
    if np.any(cn == 0):
        raise ZeroVector(f"centroid {int(np.argmin(cn))} is the zero vector")
    fn = np.linalg.norm(f, axis=1)
    sims = (f @ c.T) / np.outer(np.where(fn == 0, 1.0, fn), cn)
    d = np.clip(1.0 - sims, 0.0, 2.0)
    # a dead feature vector has no direction; no class can win
    d[fn == 0] = 1.0
    return d


def margin_select(distances: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Admission mask and argmin labels for an (N, m) distance matrix.

    Admitted iff the nearest class beats every other class by >= delta;
    exact ties are always rejected.
    """
    d = np.asarray(distances)
    best = np.argmin(d, axis=1)
    rows = np.arange(len(d))
    nearest = d[rows, best]
    others = d.copy()
    others[rows, best] = np.inf
    gap = others.min(axis=1) - nearest
    return (gap >= delta) & (gap > 0), best


def assign_pseudo_labels(pool: UnlabeledPool, params: ModelParams, centers: CentroidSet,
                         cfg: SelectionConfig, features: np.ndarray | None = None) -> AuxiliaryDataset:
    if features is None:
        features = forward_features(params, pool.images)
    if features.shape[1] != centers.centers.shape[1]:
        raise ValueError(f"pool feature dim {features.shape[1]} != centroid dim {centers.centers.shape[1]}")
    dist = cosine_distance_matrix(features, centers.centers)
    admitted, labels = margin_select(dist, cfg.delta)
    idx = np.flatnonzero(admitted)
    chosen = dist[idx, labels[idx]]
    if cfg.per_class_cap is not None:
        keep = []
        for k in range(centers.num_classes):
            members = idx[labels[idx] == k]
            d = dist[members, k]
            order = np.lexsort((pool.source_ids[members], d))
            keep.extend(members[order[:cfg.per_class_cap]])
        idx = np.asarray(sorted(keep, key=lambda i: pool.source_ids[i]), dtype=np.int64)
        chosen = dist[idx, labels[idx]]
    else:
        order = np.argsort(pool.source_ids[idx], kind="stable")
        idx, chosen = idx[order], chosen[order]
    return AuxiliaryDataset(pool.images[idx], labels[idx].astype(np.int64), chosen,
                            pool.source_ids[idx], centers.num_classes)


def selection_report(aux: AuxiliaryDataset) -> dict:
    """Per-class counts, distance summary and id lists (most confident first)."""
    per_class = aux.sorted_by_class()
    counts = [int(len(per_class[k])) for k in range(aux.num_classes)]
    summary = {}
    for k, rows in per_class.items():
        if len(rows):
            d = aux.distances[rows]
            summary[k] = {"min": float(d.min()), "median": float(np.median(d)), "max": float(d.max())}
        else:
            summary[k] = None
    return {
        "total": int(len(aux)),
        "counts": counts,
        "distance": summary,
        "sorted_ids": {k: [int(i) for i in aux.source_ids[rows]] for k, rows in per_class.items()},
    }


# ---------------------------------------------------------------------------
# manifest files
# ---------------------------------------------------------------------------

def write_manifest(aux: AuxiliaryDataset, path, config_hash: str = "") -> None:
    """One ``source_id<TAB>pseudo_label<TAB>distance`` record per line.

    The first line is a ``#`` comment carrying the config hash; it is not a
    record.
    """
    lines = [f"# omnifer-manifest classes={aux.num_classes} config_hash={config_hash}"]
    for sid, lab, d in zip(aux.source_ids, aux.pseudo_labels, aux.distances):
        lines.append(f"{int(sid)}\t{int(lab)}\t{float(d):.8e}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict]:
    ids, labels, dists, meta = [], [], [], {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    key, value = tok.split("=", 1)
                    meta[key] = value
            continue
        sid, lab, d = line.split("\t")
        ids.append(int(sid))
        labels.append(int(lab))
        dists.append(float(d))
    return (np.asarray(ids, dtype=np.int64), np.asarray(labels, dtype=np.int64),
            np.asarray(dists, dtype=np.float64), meta)


def aux_from_manifest(path, pool: UnlabeledPool, num_classes: int | None = None) -> AuxiliaryDataset:
    ids, labels, dists, meta = read_manifest(path)
    m = num_classes if num_classes is not None else int(meta.get("classes", 0))
    lookup = {int(s): i for i, s in enumerate(pool.source_ids)}
    try:
        rows = np.asarray([lookup[int(s)] for s in ids], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"manifest references source id {exc.args[0]} missing from the pool") from None
    if len(labels) and (labels.min() < 0 or labels.max() >= m):
        raise ValueError("manifest label out of range")
    return AuxiliaryDataset(pool.images[rows], labels, dists, ids, m)
