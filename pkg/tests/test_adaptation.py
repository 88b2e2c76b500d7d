"""Adapter statistics, the momentum schedule, loss routing, and the
episode fine-tuning loop."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idp import numerics as nm
from idp.adaptation import (
    AdapterState,
    FinetuneConfig,
    LossWeights,
    MomentumSchedule,
    NormLayerState,
    adapter_forward,
    adapter_tape,
    align_loss,
    batch_stats,
    finetune_episode,
    init_adapter,
    momentum_update,
    momentum_weight,
    predict,
    target_loss,
    total_loss,
)
from idp.containers import FeatureShape, split_support_query
from idp.errors import EmptyBatch
from idp.prototypes import (
    PrototypeBank,
    SourceTrainConfig,
    cluster_prototypes,
    measurement_logits,
    reconstruction_measurement,
    train_source_prototypes,
)
from idp.proxies import ProxySet, generate_proxies
from idp.analysis import ShiftSpec, synth_domains
from idp.episodes import EpisodeSpec, _episode_rng


def layer(d=4, seed=0):
    rng = np.random.default_rng(seed)
    return NormLayerState(
        rng.standard_normal(d), rng.random(d) + 0.5, np.ones(d), np.zeros(d)
    )


class TestBatchStats:
    def test_constant_batch(self):
        mu, var = batch_stats(np.full((7, 3), 2.5))
        np.testing.assert_allclose(mu, 2.5)
        np.testing.assert_allclose(var, 0.0)

    def test_two_row_analytic(self):
        mu, var = batch_stats(np.array([[0.0], [2.0]]))
        np.testing.assert_allclose(mu, [1.0])
        np.testing.assert_allclose(var, [1.0])

    def test_two_pass_oracle(self):
        rng = np.random.default_rng(1)
        rows = rng.standard_normal((30, 5))
        mu, var = batch_stats(rows)
        mu2 = rows.sum(axis=0) / 30
        var2 = ((rows - mu2) ** 2).sum(axis=0) / 30
        np.testing.assert_allclose(mu, mu2, atol=1e-10)
        np.testing.assert_allclose(var, var2, atol=1e-10)

    def test_empty_batch(self):
        with pytest.raises(EmptyBatch):
            batch_stats(np.zeros((0, 3)))


class TestMomentum:
    def test_weight_at_zero_is_half(self):
        assert momentum_weight(0, 10.0) == 0.5

    def test_weight_saturates(self):
        assert momentum_weight(100, 10.0) >= 0.9999

    def test_weight_strictly_increasing_and_bounded(self):
        # stay below t/alpha ~ 36 where float64 sigmoid saturates to 1.0
        for alpha in (0.5, 10.0, 40.0):
            ts = range(0, min(120, int(30 * alpha)))
            values = [momentum_weight(t, alpha) for t in ts]
            assert all(b > a for a, b in zip(values, values[1:]))
            assert all(0.0 < v < 1.0 for v in values)

    def test_first_update_is_even_blend(self):
        lay = layer()
        mu_b, var_b = np.ones(4), np.full(4, 2.0)
        out = momentum_update(lay, mu_b, var_b, MomentumSchedule(alpha=10.0, t=0))
        np.testing.assert_allclose(out.mu, 0.5 * lay.mu + 0.5 * mu_b)
        np.testing.assert_allclose(out.var, 0.5 * lay.var + 0.5 * var_b)

    def test_late_update_tracks_batch(self):
        lay = layer(seed=2)
        mu_b = np.full(4, 3.0)
        out = momentum_update(lay, mu_b, lay.var, MomentumSchedule(alpha=10.0, t=100))
        assert np.abs(out.mu - mu_b).max() <= 1e-4 * np.abs(mu_b).max() + 1e-3

    def test_constant_stream_recurrence_oracle(self):
        lay = layer(seed=3)
        target_mu, target_var = np.full(4, 1.5), np.full(4, 0.75)
        mu, var = lay.mu.copy(), lay.var.copy()
        state = lay
        for t in range(50):
            state = momentum_update(state, target_mu, target_var, MomentumSchedule(10.0, t))
            g = 1.0 / (1.0 + np.exp(-t / 10.0))
            mu = (1 - g) * mu + g * target_mu
            var = (1 - g) * var + g * target_var
        np.testing.assert_allclose(state.mu, mu, atol=1e-12)
        assert np.abs(state.mu - target_mu).max() <= 1e-3

    @given(st.integers(0, 2**31 - 1), st.integers(0, 200))
    @settings(max_examples=80, deadline=None)
    def test_blend_stays_in_envelope(self, seed, t):
        rng = np.random.default_rng(seed)
        lay = NormLayerState(
            rng.standard_normal(3), rng.random(3), np.ones(3), np.zeros(3)
        )
        mu_b, var_b = rng.standard_normal(3), rng.random(3)
        out = momentum_update(lay, mu_b, var_b, MomentumSchedule(10.0, t))
        assert np.all(out.mu >= np.minimum(lay.mu, mu_b) - 1e-12)
        assert np.all(out.mu <= np.maximum(lay.mu, mu_b) + 1e-12)
        assert np.all(out.var >= 0.0)


class TestAdapterForward:
    def test_identity_parameters(self):
        d = 5
        state = AdapterState([NormLayerState(np.zeros(d), np.ones(d), np.ones(d), np.zeros(d), eps=1e-12)])
        x = np.random.default_rng(0).standard_normal((6, d))
        np.testing.assert_allclose(adapter_forward(x, state, "frozen"), x, atol=1e-6)

    def test_constant_input_maps_to_beta(self):
        d = 3
        c = 2.0
        state = AdapterState([NormLayerState(np.full(d, c), np.ones(d), np.ones(d), np.full(d, 7.0))])
        out = adapter_forward(np.full((4, d), c), state, "frozen")
        np.testing.assert_allclose(out, 7.0)

    def test_own_stats_normalize_batch(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((200, 4)) * 3.0 + 1.0
        mu, var = batch_stats(x)
        state = AdapterState([NormLayerState(mu, var, np.ones(4), np.zeros(4), eps=1e-12)])
        out = adapter_forward(x, state, "frozen")
        mu2, var2 = batch_stats(out)
        assert np.abs(mu2).max() <= 1e-6
        assert np.abs(var2 - 1.0).max() <= 1e-6

    def test_updating_mode_advances_schedule(self):
        state = init_adapter(np.random.default_rng(0).standard_normal((50, 4)))
        x = np.random.default_rng(1).standard_normal((10, 4))
        before = state.layers[0].mu.copy()
        adapter_forward(x, state, "updating")
        assert state.schedule.t == 1
        assert not np.array_equal(state.layers[0].mu, before)

    def test_frozen_mode_is_pure(self):
        state = init_adapter(np.random.default_rng(0).standard_normal((50, 4)))
        x = np.random.default_rng(1).standard_normal((10, 4))
        a = adapter_forward(x, state, "frozen")
        b = adapter_forward(x, state, "frozen")
        np.testing.assert_array_equal(a, b)
        assert state.schedule.t == 0


def toy_episode(seed=0, ways=3, shots=2, r=4, d=8, m=3):
    rng = np.random.default_rng(seed)
    support = [rng.standard_normal((shots * r, d)) + 2 * rng.standard_normal(d) for _ in range(ways)]
    batch = np.concatenate(support)
    labels = np.repeat(np.arange(ways), shots)
    bank = PrototypeBank(
        tuple("abc"[:ways]), [rng.standard_normal((m, d)) for _ in range(ways)], 0.1
    )
    mu, var = batch_stats(batch)
    adapter = AdapterState([NormLayerState(mu, var, np.ones(d), np.zeros(d))])
    pool_rows = rng.standard_normal((6, d))
    from idp.prototypes import ProxyPool

    proxies = generate_proxies(support, ProxyPool(pool_rows, "fp", 6, 0), 0.1, r)
    return support, batch, labels, bank, adapter, proxies, r


class TestLossSurfaces:
    def test_target_loss_single_class_is_zero(self):
        rng = np.random.default_rng(1)
        d = 6
        bank = PrototypeBank(("only",), [rng.standard_normal((3, d))], 0.1)
        adapter = AdapterState(
            [NormLayerState(np.zeros(d), np.ones(d), np.ones(d), np.zeros(d))]
        )
        maps = rng.standard_normal((4, 2, d))
        value, _ = target_loss(maps, np.zeros(4, dtype=np.int64), bank, adapter, 0.1)
        assert value == 0.0

    def test_target_loss_uniform_prototypes_gives_log_n(self):
        """Identical prototypes across classes make every class
        indistinguishable, so the cross-entropy is exactly log N."""
        rng = np.random.default_rng(2)
        proto = rng.standard_normal((3, 6))
        bank = PrototypeBank(("a", "b", "c"), [proto.copy() for _ in range(3)], 0.1)
        d = 6
        adapter = AdapterState([NormLayerState(np.zeros(d), np.ones(d), np.ones(d), np.zeros(d))])
        maps = rng.standard_normal((4, 2, d))
        value, grads = target_loss(maps, np.array([0, 1, 2, 0]), bank, adapter, 0.1)
        assert abs(value - np.log(3)) <= 1e-10

    def test_align_loss_zero_when_distributions_match(self):
        """Feeding the proxies themselves as the support makes both sides of
        the KL identical."""
        support, batch, labels, bank, adapter, proxies, r = toy_episode(seed=3)
        d = batch.shape[1]
        identity = AdapterState(
            [NormLayerState(np.zeros(d), np.ones(d), np.ones(d), np.zeros(d), eps=1e-12)]
        )
        stacked, _ = proxies.stacked()
        maps = stacked.reshape(-1, r, d)
        value, _ = align_loss(maps, proxies, bank, identity, 0.1)
        assert value <= 1e-6

    def test_align_loss_nonnegative(self):
        support, batch, labels, bank, adapter, proxies, r = toy_episode(seed=4)
        maps = batch.reshape(-1, r, batch.shape[1])
        value, _ = align_loss(maps, proxies, bank, adapter, 0.1)
        assert value >= 0.0

    def test_align_gradients_mask_prototypes(self):
        support, batch, labels, bank, adapter, proxies, r = toy_episode(seed=5)
        maps = batch.reshape(-1, r, batch.shape[1])
        _, grads = align_loss(maps, proxies, bank, adapter, 0.1)
        for g in grads["prototypes"]:
            np.testing.assert_array_equal(g, np.zeros_like(g))
        assert any(np.abs(g).max() > 0 for g in grads["gamma"])
        assert any(np.abs(g).max() > 0 for g in grads["beta"])

    def test_align_gradient_finite_differences_on_affine(self):
        support, batch, labels, bank, adapter, proxies, r = toy_episode(seed=6)
        d = batch.shape[1]
        p_ref = nm.softmax(
            measurement_logits(
                nm.constant(proxies.stacked()[0]),
                [nm.constant(v) for v in bank.prototypes],
                0.1,
                r,
            ).value
        )

        def fn(p):
            adapted = adapter_tape(nm.constant(batch), adapter, [p["gamma"]], [p["beta"]])
            logits = measurement_logits(
                adapted, [nm.constant(v) for v in bank.prototypes], 0.1, r
            )
            return nm.mean_kl_logits(p_ref, logits)

        err = nm.grad_check(fn, {"gamma": np.ones(d), "beta": np.zeros(d)})
        assert err <= 1e-4

    def test_target_loss_finite_differences(self):
        support, batch, labels, bank, adapter, proxies, r = toy_episode(seed=7)
        d = batch.shape[1]

        def fn(p):
            adapted = adapter_tape(nm.constant(batch), adapter, [p["gamma"]], [p["beta"]])
            logits = measurement_logits(adapted, [p["v0"], p["v1"], p["v2"]], 0.1, r)
            return nm.mean_ce_logits(logits, labels)

        params = {f"v{i}": bank.prototypes[i] for i in range(3)}
        params["gamma"] = np.ones(d)
        params["beta"] = np.zeros(d)
        assert nm.grad_check(fn, params) <= 1e-4

    def test_total_loss_weighting(self):
        assert total_loss((0.7, 0.2, 0.4), LossWeights(1, 0, 0)) == 0.7
        assert total_loss((0.5, 0.25, 0.125), LossWeights(1, 1, 1)) == 0.875


def shifted_world(seed=0, noise=0.8):
    shape = FeatureShape(2, 2, 12)
    spec = ShiftSpec.from_magnitude(12, 1.0, seed, noise)
    src, tgt = synth_domains(spec, 8, 40, shape)
    bank, _ = train_source_prototypes(
        src, SourceTrainConfig(steps=120, per_class=8, batch_size=32, seed=seed)
    )
    pool = cluster_prototypes(bank, 32, seed)
    adapter = init_adapter(src.all_rows())
    return src, tgt, bank, pool, adapter


class TestFinetuneEpisode:
    def _split(self, tgt, seed=5):
        rng = _episode_rng(seed, 0)
        return split_support_query(tgt, EpisodeSpec(5, 5, 16, 1, seed), rng), rng

    def test_zero_steps_returns_initial_state(self):
        src, tgt, bank, pool, adapter = shifted_world()
        split, rng = self._split(tgt)
        result = finetune_episode(
            split, bank, pool, adapter, FinetuneConfig(steps=0, per_class=8), rng
        )
        assert result.trace == []
        assert result.adapter.schedule.t == 0
        for lay, ref in zip(result.adapter.layers, adapter.layers):
            np.testing.assert_array_equal(lay.mu, ref.mu)

    def test_zero_learning_rate_freezes_parameters(self):
        src, tgt, bank, pool, adapter = shifted_world()
        split, rng = self._split(tgt)
        cfg = FinetuneConfig(steps=5, learning_rate=0.0, per_class=8)
        rng_init = _episode_rng(5, 0)
        split_init = split_support_query(tgt, EpisodeSpec(5, 5, 16, 1, 5), rng_init)
        from idp.adaptation import init_target_bank

        expected = init_target_bank(
            split_init, adapter.copy(), 8, ("a",) * 5, rng_init, 0.1
        )
        result = finetune_episode(split, bank, pool, adapter, cfg, rng)
        for got, want in zip(result.bank.prototypes, expected.prototypes):
            np.testing.assert_array_equal(got, want)
        for lay, ref in zip(result.adapter.layers, adapter.layers):
            np.testing.assert_array_equal(lay.gamma, ref.gamma)
            assert not np.array_equal(lay.mu, ref.mu)  # stats still moved

    def test_align_only_step_touches_affine_only(self):
        src, tgt, bank, pool, adapter = shifted_world()
        split, rng = self._split(tgt)
        cfg = FinetuneConfig(steps=1, per_class=8, weights=LossWeights(0.0, 0.0, 1.0))
        rng_init = _episode_rng(5, 0)
        split_init = split_support_query(tgt, EpisodeSpec(5, 5, 16, 1, 5), rng_init)
        from idp.adaptation import init_target_bank

        expected = init_target_bank(
            split_init, adapter.copy(), 8, ("a",) * 5, rng_init, 0.1
        )
        result = finetune_episode(split, bank, pool, adapter, cfg, rng)
        for got, want in zip(result.bank.prototypes, expected.prototypes):
            np.testing.assert_array_equal(got, want)
        assert any(
            not np.array_equal(lay.gamma, ref.gamma)
            for lay, ref in zip(result.adapter.layers, adapter.layers)
        )

    def test_deterministic_given_rng(self):
        src, tgt, bank, pool, adapter = shifted_world()
        cfg = FinetuneConfig(steps=3, per_class=8)
        outs = []
        for _ in range(2):
            split, rng = self._split(tgt)
            outs.append(finetune_episode(split, bank, pool, adapter, cfg, rng))
        for a, b in zip(outs[0].bank.prototypes, outs[1].bank.prototypes):
            np.testing.assert_array_equal(a, b)

    def test_trace_matches_csv_columns(self):
        src, tgt, bank, pool, adapter = shifted_world()
        split, rng = self._split(tgt)
        result = finetune_episode(
            split, bank, pool, adapter, FinetuneConfig(steps=3, per_class=8), rng
        )
        assert [row.step for row in result.trace] == [0, 1, 2]
        assert result.trace[0].momentum == 0.5
        assert all(np.isfinite(row.total) for row in result.trace)


class TestPredict:
    def test_idempotent_and_normalized(self):
        src, tgt, bank, pool, adapter = shifted_world()
        rng = _episode_rng(1, 0)
        split = split_support_query(tgt, EpisodeSpec(5, 5, 4, 1, 1), rng)
        result = finetune_episode(
            split, bank, pool, adapter, FinetuneConfig(steps=2, per_class=8), rng
        )
        q = np.stack([r.data for _, r in split.query])
        a = predict(q, result.bank, result.adapter, 0.1)
        b = predict(q, result.bank, result.adapter, 0.1)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)

    def test_support_sample_recovers_own_class(self):
        """A query identical to a support sample of class i lands on i when
        classes are far apart and lambda is 0."""
        rng = np.random.default_rng(3)
        d = 6
        protos = [rng.standard_normal((3, d)) + off for off in (0.0, 30.0)]
        bank = PrototypeBank(("a", "b"), protos, 0.0)
        adapter = AdapterState(
            [NormLayerState(np.zeros(d), np.ones(d), np.ones(d), np.zeros(d), eps=1e-12)]
        )
        sample = (rng.standard_normal((1, 3)) @ protos[1]).reshape(1, -1)
        probs = predict(sample[None, :, :], bank, adapter, 0.0)
        assert probs[0].argmax() == 1

    def test_matches_end_to_end_recomputation(self):
        """Pipeline oracle: recompute adapter transform and measurement
        directly with numpy on a 2-way 1-shot toy."""
        src, tgt, bank, pool, adapter = shifted_world(seed=1)
        rng = _episode_rng(2, 0)
        split = split_support_query(tgt, EpisodeSpec(2, 1, 2, 1, 2), rng)
        result = finetune_episode(
            split, bank, pool, adapter, FinetuneConfig(steps=2, per_class=4), rng
        )
        q = np.stack([r.data for _, r in split.query])
        got = predict(q, result.bank, result.adapter, 0.1)
        lay = result.adapter.layers[0]
        for i, qm in enumerate(q):
            x = lay.gamma * (qm - lay.mu) / np.sqrt(lay.var + lay.eps) + lay.beta
            expected = reconstruction_measurement(x, result.bank, 0.1)
            np.testing.assert_allclose(got[i], expected, atol=1e-8)
