"""Normalization-statistics adapter stack and the episode fine-tuning loop.

The adapter is a stack (default depth 1) of per-channel normalization plus
affine layers applied to incoming feature rows.  Running mean/variance are
the low-order statistics, updated by a sigmoid-scheduled momentum and never
by gradients; the per-channel scale and shift are the high-order learnable
parameters.  Episode fine-tuning descends the weighted sum of the target,
proxy, and alignment losses, routing alignment gradients to the affine
parameters only.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nm
from .containers import EpisodeSplit, FeatureDataset
from .errors import DimensionMismatch, DivergedLoss, EmptyBatch, SingularSystem
from .prototypes import PrototypeBank, ProxyPool, kmeans, measurement_logits
from .proxies import ProxySet, generate_proxies, proxy_loss, refresh_pool


@dataclass
class NormLayerState:
    """Running statistics and affine parameters of one adapter layer."""

    mu: np.ndarray
    var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if np.any(self.var < 0):
            raise ValueError("variance entries must be nonnegative")

    def copy(self) -> "NormLayerState":
        return NormLayerState(
            self.mu.copy(), self.var.copy(), self.gamma.copy(), self.beta.copy(), self.eps
        )

    def inv_std(self) -> np.ndarray:
        return 1.0 / np.sqrt(self.var + self.eps)


@dataclass
class MomentumSchedule:
    alpha: float = 10.0
    t: int = 0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.t < 0:
            raise ValueError("t must be nonnegative")


def momentum_weight(t: int, alpha: float) -> float:
    """Blend weight G(t) = 1 / (1 + exp(-t / alpha)); 0.5 at t = 0."""
    return float(1.0 / (1.0 + np.exp(-t / alpha)))


def batch_stats(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased (population) variance over all rows."""
    r = np.asarray(rows, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] < 1:
        raise EmptyBatch(f"need a nonempty 2-D batch, got shape {r.shape}")
    mu = r.mean(axis=0)
    var = np.mean((r - mu) ** 2, axis=0)
    return mu, var


def momentum_update(
    layer: NormLayerState,
    batch_mu: np.ndarray,
    batch_var: np.ndarray,
    schedule: MomentumSchedule,
) -> NormLayerState:
    """Convex blend of running and batch statistics with weight G(t).

    Pure function: the caller advances the schedule.  No gradient flows
    through this path.
    """
    g = momentum_weight(schedule.t, schedule.alpha)
    return replace(
        layer,
        mu=(1.0 - g) * layer.mu + g * batch_mu,
        var=(1.0 - g) * layer.var + g * batch_var,
    )


@dataclass
class AdapterState:
    """Ordered normalization layers plus their shared momentum schedule."""

    layers: list[NormLayerState]
    schedule: MomentumSchedule = field(default_factory=MomentumSchedule)

    @property
    def channels(self) -> int:
        return self.layers[0].mu.shape[0]

    def copy(self) -> "AdapterState":
        return AdapterState(
            [l.copy() for l in self.layers],
            MomentumSchedule(self.schedule.alpha, self.schedule.t),
        )


def init_adapter(
    source_rows: np.ndarray, depth: int = 1, eps: float = 1e-5, alpha: float = 10.0
) -> AdapterState:
    """Seed running statistics from a full pass over the source rows.

    Scale starts at 1 and shift at 0, so the initial adapter is plain
    source-statistics normalization, layer by layer.
    """
    x = np.asarray(source_rows, dtype=np.float64)
    d = x.shape[1]
    layers = []
    for _ in range(depth):
        mu, var = batch_stats(x)
        layer = NormLayerState(mu, var, np.ones(d), np.zeros(d), eps)
        layers.append(layer)
        x = (x - mu) * layer.inv_std()
    return AdapterState(layers, MomentumSchedule(alpha=alpha, t=0))


def adapter_forward(
    features: np.ndarray, state: AdapterState, mode: str = "frozen"
) -> np.ndarray:
    """Apply the adapter stack to feature rows.

    In "updating" mode each layer first momentum-blends its running
    statistics with the incoming batch's statistics (advancing the shared
    schedule by one step), then normalizes with the new values.
    """
    if mode not in ("frozen", "updating"):
        raise ValueError(f"unknown mode {mode!r}")
    x = np.asarray(features, dtype=np.float64)
    if x.shape[1] != state.channels:
        raise DimensionMismatch(
            f"features have {x.shape[1]} channels, adapter has {state.channels}"
        )
    for i, layer in enumerate(state.layers):
        if mode == "updating":
            mu, var = batch_stats(x)
            layer = momentum_update(layer, mu, var, state.schedule)
            state.layers[i] = layer
        x = layer.gamma * (x - layer.mu) * layer.inv_std() + layer.beta
    if mode == "updating":
        state.schedule.t += 1
    return x


def adapter_tape(
    x: nm.Node, state: AdapterState, gammas: list[nm.Node], betas: list[nm.Node]
) -> nm.Node:
    """Differentiable adapter pass: stats are constants, affine is learnable."""
    for layer, g, b in zip(state.layers, gammas, betas):
        inv = layer.inv_std()
        x = nm.affine_const(x, inv, -layer.mu * inv)
        x = nm.channel_affine(x, g, b)
    return x


@dataclass
class LossWeights:
    target: float = 1.0
    proxy: float = 1.0
    align: float = 1.0


def total_loss(components: tuple[float, float, float], weights: LossWeights) -> float:
    """Weighted sum of the three episode losses."""
    t, p, a = components
    return weights.target * t + weights.proxy * p + weights.align * a


@dataclass
class FinetuneConfig:
    steps: int = 50
    learning_rate: float = 0.01
    lam: float = 0.1
    per_class: int = 20
    weights: LossWeights = field(default_factory=LossWeights)
    align_full_params: bool = False


@dataclass
class TraceRow:
    step: int
    target: float
    proxy: float
    align: float
    total: float
    momentum: float


@dataclass
class FinetuneResult:
    bank: PrototypeBank
    adapter: AdapterState
    pool: ProxyPool
    trace: list[TraceRow]


def trace_csv(trace: list[TraceRow]) -> str:
    """Loss trace as CSV: step, L_tar, L_proxy, L_align, L_sum, G_t."""
    lines = ["step,L_tar,L_proxy,L_align,L_sum,G_t"]
    for row in trace:
        lines.append(
            f"{row.step},{row.target:.10g},{row.proxy:.10g},"
            f"{row.align:.10g},{row.total:.10g},{row.momentum:.10g}"
        )
    return "\n".join(lines) + "\n"


class _EpisodeTape:
    """One step's recorded loss graph over the episode parameters."""

    def __init__(
        self,
        support_batch: np.ndarray,
        support_labels: np.ndarray,
        proxy_set: ProxySet | None,
        vt_values: list[np.ndarray],
        adapter: AdapterState,
        weights: LossWeights,
        lam: float,
        rows_per_map: int,
        align_full_params: bool,
    ):
        self.v_leaves = [nm.parameter(v) for v in vt_values]
        self.gamma_leaves = [nm.parameter(l.gamma) for l in adapter.layers]
        self.beta_leaves = [nm.parameter(l.beta) for l in adapter.layers]

        def apply_adapter(x: nm.Node) -> nm.Node:
            return adapter_tape(x, adapter, self.gamma_leaves, self.beta_leaves)

        adapted = apply_adapter(nm.constant(support_batch))
        terms: list[nm.Node] = []
        coeffs: list[float] = []
        self.components = [0.0, 0.0, 0.0]

        if weights.target != 0.0:
            l_tar = nm.mean_ce_logits(
                measurement_logits(adapted, self.v_leaves, lam, rows_per_map),
                support_labels,
            )
            terms.append(l_tar)
            coeffs.append(weights.target)
            self.components[0] = float(l_tar.value)
        if weights.proxy != 0.0:
            l_proxy = proxy_loss(proxy_set, self.v_leaves, lam, apply_adapter)
            terms.append(l_proxy)
            coeffs.append(weights.proxy)
            self.components[1] = float(l_proxy.value)
        if weights.align != 0.0:
            proxy_batch, _ = proxy_set.stacked()
            ref_logits = measurement_logits(
                nm.constant(proxy_batch),
                [nm.constant(v) for v in vt_values],
                lam,
                rows_per_map,
            )
            p_const = nm.softmax(ref_logits.value)
            align_bank = (
                self.v_leaves
                if align_full_params
                else [nm.constant(v) for v in vt_values]
            )
            l_align = nm.mean_kl_logits(
                p_const,
                measurement_logits(adapted, align_bank, lam, rows_per_map),
            )
            terms.append(l_align)
            coeffs.append(weights.align)
            self.components[2] = float(l_align.value)

        if terms:
            self.loss = nm.weighted_sum(terms, coeffs)
        else:
            self.loss = nm.constant(0.0)

    def gradients(self) -> dict:
        nm.backward(self.loss)
        return {
            "prototypes": [nm.grad_of(v) for v in self.v_leaves],
            "gamma": [nm.grad_of(g) for g in self.gamma_leaves],
            "beta": [nm.grad_of(b) for b in self.beta_leaves],
        }


def _support_arrays(split: EpisodeSplit) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    by_class = split.support_rows_by_class()
    shots = split.support_shots()
    batch = np.concatenate(by_class, axis=0)
    labels = np.concatenate(
        [np.full(k, i, dtype=np.int64) for i, k in enumerate(shots)]
    )
    return batch, labels, by_class


def init_target_bank(
    split: EpisodeSplit,
    adapter: AdapterState,
    per_class: int,
    class_names: tuple[str, ...],
    rng: np.random.Generator,
    lam: float,
) -> PrototypeBank:
    """K-means each class's adapted support rows into m prototypes.

    Falls back to sampling rows with replacement plus tiny noise when a
    class has fewer rows than prototypes.
    """
    protos = []
    for rows in split.support_rows_by_class():
        adapted = adapter_forward(rows, adapter, "frozen")
        if adapted.shape[0] >= per_class:
            protos.append(kmeans(adapted, per_class, rng).centroids)
        else:
            picks = rng.integers(adapted.shape[0], size=per_class)
            jitter = 1e-3 * rng.standard_normal((per_class, adapted.shape[1]))
            protos.append(adapted[picks] + jitter)
    return PrototypeBank(class_names, protos, lam=lam)


def finetune_episode(
    split: EpisodeSplit,
    source_bank: PrototypeBank,
    pool: ProxyPool,
    adapter_template: AdapterState,
    config: FinetuneConfig,
    rng: np.random.Generator,
    class_names: tuple[str, ...] | None = None,
) -> FinetuneResult:
    """Fine-tune one episode: descend the total loss over V^t, gamma, beta.

    Per step: refresh the pool if the source bank changed, regenerate
    proxies if the pool changed (both cached by fingerprint), momentum-update
    the running statistics from the raw support batch, record the loss graph,
    and apply one SGD update.  Deterministic given the rng state.
    """
    if class_names is None:
        class_names = tuple(f"class_{i}" for i in range(len(split.class_indices)))
    adapter = adapter_template.copy()
    support_batch, support_labels, support_by_class = _support_arrays(split)
    rows_per_map = support_batch.shape[0] // len(split.support)
    vt = init_target_bank(split, adapter, config.per_class, class_names, rng, config.lam)
    w = config.weights
    need_proxies = w.proxy != 0.0 or w.align != 0.0
    proxy_set: ProxySet | None = None
    trace: list[TraceRow] = []

    for step in range(config.steps):
        if source_bank.fingerprint() != pool.source_fingerprint:
            pool = refresh_pool(source_bank, pool)
        if need_proxies and (
            proxy_set is None or proxy_set.pool_fingerprint != pool.fingerprint()
        ):
            proxy_set = generate_proxies(
                support_by_class, pool, config.lam, rows_per_map
            )
        g_now = momentum_weight(adapter.schedule.t, adapter.schedule.alpha)
        adapter_forward(support_batch, adapter, "updating")
        try:
            tape = _EpisodeTape(
                support_batch,
                support_labels,
                proxy_set,
                vt.prototypes,
                adapter,
                w,
                config.lam,
                rows_per_map,
                config.align_full_params,
            )
        except SingularSystem as exc:
            # descent blew the prototypes up far enough to break the solver
            raise DivergedLoss(f"episode diverged at step {step}: {exc}") from exc
        loss_value = float(tape.loss.value)
        if not np.isfinite(loss_value):
            raise DivergedLoss(f"episode loss diverged at step {step}")
        grads = tape.gradients()
        lr = config.learning_rate
        for v, g in zip(vt.prototypes, grads["prototypes"]):
            v -= lr * g
        for layer, gg, gb in zip(adapter.layers, grads["gamma"], grads["beta"]):
            layer.gamma -= lr * gg
            layer.beta -= lr * gb
        params = vt.prototypes + [l.gamma for l in adapter.layers] + [
            l.beta for l in adapter.layers
        ]
        # beyond 1e30 the Gram systems stop factorizing long before inf
        if not all(np.all(np.isfinite(p)) and np.abs(p).max() < 1e30 for p in params):
            raise DivergedLoss(f"parameters diverged after step {step}")
        c = tape.components
        trace.append(TraceRow(step, c[0], c[1], c[2], loss_value, g_now))
    return FinetuneResult(vt, adapter, pool, trace)


def predict(
    query_maps: np.ndarray, bank: PrototypeBank, adapter: AdapterState, lam: float
) -> np.ndarray:
    """Class probabilities for a batch of query maps, frozen statistics.

    Side-effect free: repeated calls return identical outputs.
    """
    q = np.asarray(query_maps, dtype=np.float64)
    if q.ndim == 2:
        q = q[None]
    b, r, d = q.shape
    adapted = adapter_forward(q.reshape(b * r, d), adapter, "frozen")
    logits = measurement_logits(
        nm.constant(adapted), [nm.constant(v) for v in bank.prototypes], lam, r
    )
    return nm.softmax(logits.value)


# ---------------------------------------------------------------------------
# Stand-alone loss surfaces (single-loss gradients, mostly for verification)
# ---------------------------------------------------------------------------


def target_loss(
    support_maps: np.ndarray,
    labels: np.ndarray,
    bank: PrototypeBank,
    adapter: AdapterState,
    lam: float,
) -> tuple[float, dict]:
    """Mean cross-entropy of adapted support maps; gradients to V^t, gamma, beta."""
    b, r, d = support_maps.shape
    tape = _EpisodeTape(
        support_maps.reshape(b * r, d),
        np.asarray(labels, dtype=np.int64),
        None,
        bank.prototypes,
        adapter,
        LossWeights(1.0, 0.0, 0.0),
        lam,
        r,
        False,
    )
    return float(tape.loss.value), tape.gradients()


def align_loss(
    support_maps: np.ndarray,
    proxy_set: ProxySet,
    bank: PrototypeBank,
    adapter: AdapterState,
    lam: float,
    full_params: bool = False,
) -> tuple[float, dict]:
    """Mean KL from the proxy distributions to the adapted-support ones.

    The proxy-side distribution is a constant; gradients reach gamma and
    beta only (the returned prototype gradients are exactly zero) unless
    `full_params` routes them into V^t as well.
    """
    b, r, d = support_maps.shape
    tape = _EpisodeTape(
        support_maps.reshape(b * r, d),
        np.zeros(b, dtype=np.int64),
        proxy_set,
        bank.prototypes,
        adapter,
        LossWeights(0.0, 0.0, 1.0),
        lam,
        r,
        full_params,
    )
    return float(tape.loss.value), tape.gradients()
