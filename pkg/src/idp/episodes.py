"""Episodic evaluation: task sampling, per-episode fine-tune + predict,
and aggregate accuracy with 95% confidence intervals.

Episodes are independent: each derives its random stream from the master
seed and its own index, so results are identical for any worker count and
aggregation is order-free.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .adaptation import (
    AdapterState,
    FinetuneConfig,
    finetune_episode,
    predict,
)
from .containers import FeatureDataset, split_support_query
from .errors import DivergedLoss, InsufficientSamples
from .prototypes import PrototypeBank, ProxyPool


@dataclass(frozen=True)
class EpisodeSpec:
    """N-way K-shot task shape; shots may be an inclusive (lo, hi) range
    drawn per class for random-shot evaluation."""

    ways: int = 5
    shots: int | tuple[int, int] = 5
    queries: int = 16
    episodes: int = 600
    seed: int = 0

    def __post_init__(self):
        if self.queries < 1 or self.episodes < 1:
            raise ValueError("queries and episodes must be >= 1")
        if isinstance(self.shots, tuple):
            lo, hi = self.shots
            if not 1 <= lo <= hi:
                raise ValueError(f"invalid shot range {self.shots}")
        elif self.shots < 1:
            raise ValueError("shots must be >= 1")

    @property
    def max_shots(self) -> int:
        return self.shots[1] if isinstance(self.shots, tuple) else self.shots


@dataclass
class EvalReport:
    accuracies: list[float | None]
    failures: list[tuple[int, str]]
    mean: float
    half_width: float
    config_fingerprint: str = ""
    variant: str = "full"
    wall_clock: float = 0.0

    def summary(self) -> str:
        return f"acc {self.mean:.4f} \u00b1 {self.half_width:.4f}"

    def to_json(self) -> str:
        """Deterministic report payload; wall-clock is deliberately excluded
        so byte-identical runs produce byte-identical reports."""
        episodes = []
        for i, acc in enumerate(self.accuracies):
            if acc is None:
                episodes.append({"index": i, "error": dict(self.failures)[i]})
            else:
                episodes.append({"index": i, "accuracy": acc})
        doc = {
            "episodes": episodes,
            "evaluated": sum(a is not None for a in self.accuracies),
            "failed": len(self.failures),
            "mean": self.mean,
            "half_width": self.half_width,
            "config_fingerprint": self.config_fingerprint,
            "variant": self.variant,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def confidence_interval(accuracies) -> tuple[float, float]:
    """Mean and 1.96 s / sqrt(E) half-width with the sample (n-1) deviation.

    A single value yields half-width 0 by convention.
    """
    vals = np.asarray(list(accuracies), dtype=np.float64)
    if vals.size == 0:
        raise ValueError("no accuracies to aggregate")
    mean = float(vals.mean())
    if vals.size == 1:
        return mean, 0.0
    s = float(vals.std(ddof=1))
    return mean, 1.96 * s / np.sqrt(vals.size)


@dataclass
class EvalSetup:
    """Everything one episode needs besides the data and the episode spec."""

    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    adapter: AdapterState | None = None
    workers: int = 1
    config_fingerprint: str = ""
    variant: str = "full"


_CTX: dict = {}


def _episode_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(index,)))


def run_one_episode(
    dataset: FeatureDataset,
    bank: PrototypeBank,
    pool: ProxyPool,
    spec: EpisodeSpec,
    setup: EvalSetup,
    index: int,
) -> float:
    """Sample, fine-tune, and score one episode; returns query accuracy."""
    rng = _episode_rng(spec.seed, index)
    split = split_support_query(dataset, spec, rng)
    names = tuple(dataset.labels.names[i] for i in split.class_indices)
    result = finetune_episode(
        split, bank, pool, setup.adapter, setup.finetune, rng, class_names=names
    )
    query_maps = np.stack([rec.data for _, rec in split.query])
    labels = np.array([lab for lab, _ in split.query], dtype=np.int64)
    probs = predict(query_maps, result.bank, result.adapter, setup.finetune.lam)
    return float(np.mean(probs.argmax(axis=1) == labels))


def _init_worker(payload):
    _CTX["payload"] = payload


def _worker(index: int):
    dataset, bank, pool, spec, setup = _CTX["payload"]
    try:
        return index, run_one_episode(dataset, bank, pool, spec, setup, index), None
    except DivergedLoss as exc:
        return index, None, str(exc)


def run_evaluation(
    dataset: FeatureDataset,
    bank: PrototypeBank,
    pool: ProxyPool,
    spec: EpisodeSpec,
    setup: EvalSetup,
) -> EvalReport:
    """Evaluate E independent episodes and aggregate their accuracies.

    Failed episodes (diverged loss) are excluded from the mean but listed
    in the report.  Deterministic for a given master seed regardless of the
    worker count.
    """
    if spec.ways < 2:
        raise ValueError("evaluation needs at least 2 ways")
    per_class = dataset.by_class()
    if spec.ways > len(per_class):
        raise InsufficientSamples(
            f"need {spec.ways} classes, dataset has {len(per_class)}"
        )
    need = spec.max_shots + spec.queries
    for name, recs in zip(dataset.labels.names, per_class):
        if len(recs) < need:
            raise InsufficientSamples(
                f"class {name!r} has {len(recs)} records, needs {need}"
            )
    started = time.monotonic()
    results: list[tuple[int, float | None, str | None]] = []
    payload = (dataset, bank, pool, spec, setup)
    if setup.workers <= 1:
        _init_worker(payload)
        results = [_worker(i) for i in range(spec.episodes)]
    else:
        with ProcessPoolExecutor(
            max_workers=setup.workers, initializer=_init_worker, initargs=(payload,)
        ) as pool_exec:
            results = list(pool_exec.map(_worker, range(spec.episodes), chunksize=1))
    results.sort(key=lambda r: r[0])
    accuracies: list[float | None] = [acc for _, acc, _ in results]
    failures = [(i, msg) for i, _, msg in results if msg is not None]
    evaluated = [a for a in accuracies if a is not None]
    if evaluated:
        mean, half = confidence_interval(evaluated)
    else:
        mean, half = float("nan"), 0.0
    return EvalReport(
        accuracies=accuracies,
        failures=failures,
        mean=mean,
        half_width=half,
        config_fingerprint=setup.config_fingerprint,
        variant=setup.variant,
        wall_clock=time.monotonic() - started,
    )
