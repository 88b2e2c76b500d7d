"""Feature-map data model and bit-exact container format.

A container stores dense feature maps extracted by any external backbone.
Layout (all integers little-endian):

    magic "IDPF" | version u32 | role u8 (0=source, 1=target)
    | W u16 | H u16 | D u32 | class_count u32
    | per class: name_len u16 + UTF-8 bytes
    | record_count u64
    | per record: sample_id u64 | label u32 | W*H*D float32

Feature rows are position-major: index(h, w, d) = (h*W + w)*D + d, so each
record is a (W*H) x D matrix whose rows are position vectors.  On-disk
floats are 32-bit; in memory everything is promoted to float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    CorruptRecord,
    InsufficientSamples,
    IoFailure,
    NonFiniteFeature,
    VersionUnsupported,
)

MAGIC = b"IDPF"
VERSION = 1
ROLE_SOURCE = "source"
ROLE_TARGET = "target"
_ROLE_CODES = {ROLE_SOURCE: 0, ROLE_TARGET: 1}
_ROLE_NAMES = {v: k for k, v in _ROLE_CODES.items()}


@dataclass(frozen=True)
class FeatureShape:
    """Spatial feature-map shape: W x H positions, D channels."""

    width: int
    height: int
    channels: int

    def __post_init__(self):
        if min(self.width, self.height, self.channels) < 1:
            raise ValueError(f"invalid feature shape {self}")

    @property
    def positions(self) -> int:
        return self.width * self.height


@dataclass
class FeatureMap:
    """One sample: an r x D matrix of position vectors plus a label index."""

    sample_id: int
    label: int
    data: np.ndarray


@dataclass(frozen=True)
class LabelSpace:
    """Ordered class names plus the dataset role (source or target)."""

    names: tuple[str, ...]
    role: str

    def __post_init__(self):
        if self.role not in _ROLE_CODES:
            raise ValueError(f"unknown role {self.role!r}")
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")


@dataclass
class FeatureDataset:
    shape: FeatureShape
    labels: LabelSpace
    records: list[FeatureMap] = field(default_factory=list)

    def validate(self) -> None:
        n_classes = len(self.labels.names)
        counts = np.zeros(n_classes, dtype=np.int64)
        expect = (self.shape.positions, self.shape.channels)
        for rec in self.records:
            if not 0 <= rec.label < n_classes:
                raise CorruptRecord(f"label {rec.label} out of range")
            if rec.data.shape != expect:
                raise CorruptRecord(
                    f"record {rec.sample_id} has shape {rec.data.shape}, want {expect}"
                )
            if not np.all(np.isfinite(rec.data)):
                raise NonFiniteFeature(f"record {rec.sample_id} has non-finite entries")
            counts[rec.label] += 1
        if n_classes and counts.min() < 1:
            empty = self.labels.names[int(counts.argmin())]
            raise CorruptRecord(f"class {empty!r} has no records")

    def by_class(self) -> list[list[FeatureMap]]:
        out: list[list[FeatureMap]] = [[] for _ in self.labels.names]
        for rec in self.records:
            out[rec.label].append(rec)
        return out

    def class_rows(self, label: int) -> np.ndarray:
        """All position vectors of one class stacked into a single matrix."""
        maps = [rec.data for rec in self.records if rec.label == label]
        return np.concatenate(maps, axis=0)

    def all_rows(self) -> np.ndarray:
        return np.concatenate([rec.data for rec in self.records], axis=0)


class _Cursor:
    """Sequential reader with hard EOF checks."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CorruptRecord(f"truncated while reading {what}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def read_container(path) -> FeatureDataset:
    """Read and fully validate a feature container."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    cur = _Cursor(blob)
    if cur.take(4, "magic") != MAGIC:
        raise BadMagic(f"{path} is not a feature container")
    (version,) = cur.unpack("<I", "version")
    if version != VERSION:
        raise VersionUnsupported(f"container version {version}, reader supports {VERSION}")
    (role_code,) = cur.unpack("<B", "role")
    if role_code not in _ROLE_NAMES:
        raise CorruptRecord(f"unknown role code {role_code}")
    w, h = cur.unpack("<HH", "shape")
    (d,) = cur.unpack("<I", "channels")
    (n_classes,) = cur.unpack("<I", "class count")
    try:
        shape = FeatureShape(w, h, d)
    except ValueError as exc:
        raise CorruptRecord(str(exc)) from exc
    names = []
    for i in range(n_classes):
        (name_len,) = cur.unpack("<H", f"class {i} name length")
        names.append(cur.take(name_len, f"class {i} name").decode("utf-8"))
    try:
        labels = LabelSpace(tuple(names), _ROLE_NAMES[role_code])
    except ValueError as exc:
        raise CorruptRecord(str(exc)) from exc
    (n_records,) = cur.unpack("<Q", "record count")
    payload = shape.positions * shape.channels
    records = []
    for i in range(n_records):
        (sample_id,) = cur.unpack("<Q", f"record {i} id")
        (label,) = cur.unpack("<I", f"record {i} label")
        raw = cur.take(4 * payload, f"record {i} payload")
        data = (
            np.frombuffer(raw, dtype="<f4")
            .astype(np.float64)
            .reshape(shape.positions, shape.channels)
        )
        records.append(FeatureMap(sample_id, label, data))
    if cur.pos != len(blob):
        raise CorruptRecord(f"{len(blob) - cur.pos} trailing bytes after last record")
    ds = FeatureDataset(shape, labels, records)
    ds.validate()
    return ds


def write_container(dataset: FeatureDataset, path) -> None:
    """Write a validated dataset as a deterministic byte stream."""
    dataset.validate()
    parts = [MAGIC, struct.pack("<I", VERSION)]
    parts.append(struct.pack("<B", _ROLE_CODES[dataset.labels.role]))
    parts.append(
        struct.pack(
            "<HHI", dataset.shape.width, dataset.shape.height, dataset.shape.channels
        )
    )
    parts.append(struct.pack("<I", len(dataset.labels.names)))
    for name in dataset.labels.names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
    parts.append(struct.pack("<Q", len(dataset.records)))
    for rec in dataset.records:
        parts.append(struct.pack("<QI", rec.sample_id, rec.label))
        parts.append(rec.data.astype("<f4").tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


@dataclass
class EpisodeSplit:
    """One sampled task: N classes with disjoint support and query maps.

    `class_indices[i]` is the dataset label behind local class i; support
    and query hold (local_label, FeatureMap) pairs.
    """

    class_indices: list[int]
    support: list[tuple[int, FeatureMap]]
    query: list[tuple[int, FeatureMap]]

    def support_rows_by_class(self) -> list[np.ndarray]:
        ways = len(self.class_indices)
        rows: list[list[np.ndarray]] = [[] for _ in range(ways)]
        for label, rec in self.support:
            rows[label].append(rec.data)
        return [np.concatenate(r, axis=0) for r in rows]

    def support_shots(self) -> list[int]:
        ways = len(self.class_indices)
        shots = [0] * ways
        for label, _ in self.support:
            shots[label] += 1
        return shots


def split_support_query(dataset: FeatureDataset, spec, rng: np.random.Generator) -> EpisodeSplit:
    """Sample one episode: N classes, per-class disjoint support/query sets.

    `spec` needs `.ways`, `.shots` (int or inclusive (lo, hi) range drawn
    per class) and `.queries`.  Deterministic given the rng state.
    """
    ways, shots, queries = spec.ways, spec.shots, spec.queries
    per_class = dataset.by_class()
    if ways > len(per_class):
        raise InsufficientSamples(
            f"need {ways} classes, dataset has {len(per_class)}"
        )
    chosen = rng.choice(len(per_class), size=ways, replace=False)
    if isinstance(shots, tuple):
        k_per_class = [int(rng.integers(shots[0], shots[1] + 1)) for _ in range(ways)]
    else:
        k_per_class = [int(shots)] * ways
    support: list[tuple[int, FeatureMap]] = []
    query: list[tuple[int, FeatureMap]] = []
    for local, source_label in enumerate(chosen):
        recs = per_class[int(source_label)]
        k = k_per_class[local]
        if len(recs) < k + queries:
            raise InsufficientSamples(
                f"class {dataset.labels.names[int(source_label)]!r} has "
                f"{len(recs)} records, needs {k + queries}"
            )
        order = rng.permutation(len(recs))
        support.extend((local, recs[int(j)]) for j in order[:k])
        query.extend((local, recs[int(j)]) for j in order[k : k + queries])
    return EpisodeSplit([int(c) for c in chosen], support, query)
