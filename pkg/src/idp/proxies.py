"""Intermediate-domain proxies: per-class ridge reconstructions of target
support features from the shared source pool, plus their semantic loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import numerics as nm
from .errors import DimensionMismatch
from .prototypes import PrototypeBank, ProxyPool, cluster_prototypes, measurement_logits


@dataclass
class ProxySet:
    """Per-class reconstructed proxy rows, (shots_i * r) x D each.

    Classes never mix: P_i depends only on class i's support rows and the
    pool.  Proxies are constants with respect to all gradients.
    """

    class_maps: list[np.ndarray]
    rows_per_map: int
    pool_fingerprint: str
    lam: float

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """All proxy maps stacked plus one class label per map."""
        labels = []
        for i, m in enumerate(self.class_maps):
            labels.extend([i] * (m.shape[0] // self.rows_per_map))
        return np.concatenate(self.class_maps, axis=0), np.array(labels, dtype=np.int64)


def generate_proxies(
    support_by_class: list[np.ndarray],
    pool: ProxyPool,
    lam: float,
    rows_per_map: int,
) -> ProxySet:
    """Reconstruct each class's support rows from the pool, independently."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    maps = []
    for rows in support_by_class:
        if rows.shape[1] != pool.matrix.shape[1]:
            raise DimensionMismatch(
                f"support rows have {rows.shape[1]} channels, pool has "
                f"{pool.matrix.shape[1]}"
            )
        _, recon = nm.ridge_solve(rows, pool.matrix, lam)
        maps.append(recon)
    return ProxySet(maps, rows_per_map, pool.fingerprint(), lam)


def proxy_loss(
    proxy_set: ProxySet,
    bank: list[nm.Node],
    lam: float,
    adapter_apply: Optional[Callable[[nm.Node], nm.Node]] = None,
) -> nm.Node:
    """Mean cross-entropy of the proxy maps against their own class labels.

    Proxy rows enter as constants; gradients reach the bank nodes and any
    parameters captured by `adapter_apply`.
    """
    batch, labels = proxy_set.stacked()
    feats = nm.constant(batch)
    if adapter_apply is not None:
        feats = adapter_apply(feats)
    logits = measurement_logits(feats, bank, lam, proxy_set.rows_per_map)
    return nm.mean_ce_logits(logits, labels)


def refresh_pool(bank: PrototypeBank, pool: ProxyPool) -> ProxyPool:
    """Re-cluster an updated bank with the pool's own seed and size."""
    return cluster_prototypes(bank, pool.pool_size, pool.seed)
