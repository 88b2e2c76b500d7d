"""Learnable dense prototype banks, the reconstruction classifier, and
K-means pooling of bank vectors into the shared reconstruction vocabulary.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .containers import FeatureDataset, FeatureShape, LabelSpace
from .errors import (
    BadMagic,
    CorruptRecord,
    DimensionMismatch,
    DivergedLoss,
    EmptyBank,
    IoFailure,
)

BANK_MAGIC = b"IDPB"
POOL_MAGIC = b"IDPU"
_ARTIFACT_VERSION = 1


@dataclass
class PrototypeBank:
    """Per-class banks of dense prototype vectors, each m x D."""

    class_names: tuple[str, ...]
    prototypes: list[np.ndarray]
    lam: float = 0.1
    config_fingerprint: str = ""
    source_fingerprint: str = ""

    @property
    def per_class(self) -> int:
        return self.prototypes[0].shape[0]

    @property
    def channels(self) -> int:
        return self.prototypes[0].shape[1]

    def fingerprint(self) -> str:
        # Hash the on-disk (float32) payload so the fingerprint survives a
        # save/load round trip.
        h = hashlib.sha256()
        h.update("|".join(self.class_names).encode("utf-8"))
        for v in self.prototypes:
            h.update(v.astype("<f4").tobytes())
        return h.hexdigest()


@dataclass
class ProxyPool:
    """K-means centroids of all bank vectors: the reconstruction vocabulary."""

    matrix: np.ndarray
    source_fingerprint: str
    pool_size: int
    seed: int

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.matrix.astype("<f4").tobytes())
        h.update(self.source_fingerprint.encode("ascii"))
        return h.hexdigest()


def init_bank(
    labels: LabelSpace, shape: FeatureShape, per_class: int, rng: np.random.Generator
) -> PrototypeBank:
    """Random bank: i.i.d. standard normal entries scaled by 1/sqrt(D)."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    d = shape.channels
    protos = [
        rng.standard_normal((per_class, d)) / np.sqrt(d) for _ in labels.names
    ]
    return PrototypeBank(labels.names, protos)


def measurement_logits(
    features: nm.Node, prototypes: list[nm.Node], lam: float, group_size: int
) -> nm.Node:
    """Batched per-class reconstruction-error logits (tape).

    `features` holds B stacked maps of `group_size` rows each; the result
    is a B x C matrix of logits, one column per class, where each logit is
    the negated per-map mean squared reconstruction error from that class's
    prototypes.
    """
    errors = []
    for proto in prototypes:
        recon = nm.tape_ridge_reconstruction(features, proto, lam)
        errors.append(nm.group_mean_sq(nm.sub(recon, features), group_size))
    return nm.scale(nm.stack_columns(errors), -1.0)


def batch_measurement(
    batch_rows: np.ndarray, bank: PrototypeBank, lam: float, group_size: int
) -> np.ndarray:
    """Probabilities of each class for B stacked maps, softmax over classes."""
    feats = nm.constant(batch_rows)
    protos = [nm.constant(v) for v in bank.prototypes]
    logits = measurement_logits(feats, protos, lam, group_size)
    return nm.softmax(logits.value)


def reconstruction_measurement(
    features: np.ndarray, bank: PrototypeBank, lam: float
) -> np.ndarray:
    """Class probabilities for one feature map.

    For each class the map is ridge-reconstructed from that class's
    prototypes; the classifier is a softmax over the negated per-position
    mean squared reconstruction errors.
    """
    f = nm.as_matrix(features, "features")
    if f.shape[1] != bank.channels:
        raise DimensionMismatch(
            f"features have {f.shape[1]} channels, bank has {bank.channels}"
        )
    return batch_measurement(f, bank, lam, f.shape[0])[0]


@dataclass
class SourceTrainConfig:
    learning_rate: float = 0.05
    steps: int = 350
    batch_size: int = 64
    lam: float = 0.1
    per_class: int = 20
    seed: int = 0


def train_source_prototypes(
    dataset: FeatureDataset, config: SourceTrainConfig
) -> tuple[PrototypeBank, list[float]]:
    """Fit the source bank by mini-batch cross-entropy on the source set.

    The backbone is external and frozen; only the bank improves.  Returns
    the bank and the per-step loss trace.  Deterministic given
    (seed, data, config).
    """
    rng = np.random.default_rng(config.seed)
    bank = init_bank(dataset.labels, dataset.shape, config.per_class, rng)
    r = dataset.shape.positions
    maps = np.stack([rec.data for rec in dataset.records])
    labels = np.array([rec.label for rec in dataset.records], dtype=np.int64)
    n = len(dataset.records)
    trace: list[float] = []
    for _ in range(config.steps):
        idx = rng.choice(n, size=min(config.batch_size, n), replace=False)
        batch = maps[idx].reshape(-1, dataset.shape.channels)
        feats = nm.constant(batch)
        leaves = [nm.parameter(v) for v in bank.prototypes]
        loss = nm.mean_ce_logits(
            measurement_logits(feats, leaves, config.lam, r), labels[idx]
        )
        if not np.isfinite(loss.value):
            raise DivergedLoss(f"source loss diverged at step {len(trace)}")
        nm.backward(loss)
        for v, leaf in zip(bank.prototypes, leaves):
            v -= config.learning_rate * nm.grad_of(leaf)
        trace.append(float(loss.value))
    return bank, trace


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    objective_trace: list[float] = field(default_factory=list)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    p2 = (points * points).sum(axis=1)[:, None]
    c2 = (centroids * centroids).sum(axis=1)[None, :]
    return np.maximum(p2 + c2 - 2.0 * points @ centroids.T, 0.0)


def kmeans(
    points: np.ndarray,
    k: int,
    rng: np.random.Generator,
    tol: float = 1e-6,
    max_iter: int = 100,
) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Stops when the largest centroid shift drops below `tol` or after
    `max_iter` iterations; empty clusters are re-seeded from the point
    farthest from its assigned centroid.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n == 0:
        raise EmptyBank("kmeans over zero points")
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")

    # k-means++ seeding
    centroids = np.empty((k, pts.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = pts[first]
    d2 = _sq_dists(pts, centroids[:1]).min(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[j] = pts[first]
            continue
        pick = int(rng.choice(n, p=d2 / total))
        centroids[j] = pts[pick]
        d2 = np.minimum(d2, _sq_dists(pts, centroids[j : j + 1]).min(axis=1))

    assignments = np.zeros(n, dtype=np.int64)
    trace: list[float] = []
    for _ in range(max_iter):
        dists = _sq_dists(pts, centroids)
        assignments = dists.argmin(axis=1)
        trace.append(float(dists[np.arange(n), assignments].sum()))
        new_centroids = centroids.copy()
        for j in range(k):
            members = assignments == j
            if members.any():
                new_centroids[j] = pts[members].mean(axis=0)
            else:
                farthest = int(dists[np.arange(n), assignments].argmax())
                new_centroids[j] = pts[farthest]
        shift = np.abs(new_centroids - centroids).max()
        centroids = new_centroids
        if shift < tol:
            break
    dists = _sq_dists(pts, centroids)
    assignments = dists.argmin(axis=1)
    trace.append(float(dists[np.arange(n), assignments].sum()))
    return KMeansResult(centroids, assignments, trace)


def cluster_prototypes(bank: PrototypeBank, pool_size: int, seed: int) -> ProxyPool:
    """Cluster all bank vectors into the shared reconstruction pool."""
    if not bank.prototypes:
        raise EmptyBank("bank has no classes")
    stacked = np.concatenate(bank.prototypes, axis=0)
    if pool_size > stacked.shape[0]:
        raise ValueError(
            f"pool_size {pool_size} exceeds {stacked.shape[0]} bank vectors"
        )
    result = kmeans(stacked, pool_size, np.random.default_rng(seed))
    if not np.all(np.isfinite(result.centroids)):
        raise EmptyBank("clustering produced non-finite centroids")
    return ProxyPool(result.centroids, bank.fingerprint(), pool_size, seed)


# ---------------------------------------------------------------------------
# Artifact serialization: JSON header + raw float32 payload, versioned.
# ---------------------------------------------------------------------------


def _write_artifact(path, magic: bytes, header: dict, payload: np.ndarray) -> None:
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(magic)
            fh.write(struct.pack("<II", _ARTIFACT_VERSION, len(raw)))
            fh.write(raw)
            fh.write(payload.astype("<f4").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _read_artifact(path, magic: bytes) -> tuple[dict, np.ndarray]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if blob[:4] != magic:
        raise BadMagic(f"{path} is not a {magic.decode()} artifact")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != _ARTIFACT_VERSION:
        raise CorruptRecord(f"artifact version {version} unsupported")
    header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
    payload = np.frombuffer(blob[12 + header_len :], dtype="<f4").astype(np.float64)
    return header, payload


def save_bank(bank: PrototypeBank, path) -> None:
    header = {
        "classes": list(bank.class_names),
        "per_class": bank.per_class,
        "channels": bank.channels,
        "lambda": bank.lam,
        "config_fingerprint": bank.config_fingerprint,
        "source_fingerprint": bank.source_fingerprint,
    }
    _write_artifact(path, BANK_MAGIC, header, np.concatenate(bank.prototypes, axis=0))


def load_bank(path) -> PrototypeBank:
    header, payload = _read_artifact(path, BANK_MAGIC)
    names = tuple(header["classes"])
    m, d = header["per_class"], header["channels"]
    if payload.size != len(names) * m * d:
        raise CorruptRecord(f"bank payload size {payload.size} mismatches header")
    protos = [
        payload[i * m * d : (i + 1) * m * d].reshape(m, d).copy()
        for i in range(len(names))
    ]
    return PrototypeBank(
        names,
        protos,
        lam=header["lambda"],
        config_fingerprint=header["config_fingerprint"],
        source_fingerprint=header["source_fingerprint"],
    )


def save_pool(pool: ProxyPool, path) -> None:
    header = {
        "pool_size": pool.pool_size,
        "channels": pool.matrix.shape[1],
        "seed": pool.seed,
        "source_fingerprint": pool.source_fingerprint,
    }
    _write_artifact(path, POOL_MAGIC, header, pool.matrix)


def load_pool(path) -> ProxyPool:
    header, payload = _read_artifact(path, POOL_MAGIC)
    k, d = header["pool_size"], header["channels"]
    if payload.size != k * d:
        raise CorruptRecord(f"pool payload size {payload.size} mismatches header")
    return ProxyPool(
        payload.reshape(k, d).copy(),
        header["source_fingerprint"],
        k,
        header["seed"],
    )
