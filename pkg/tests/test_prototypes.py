"""Bank initialization, the reconstruction classifier, source training,
and K-means pooling."""

import numpy as np
import pytest

from idp.containers import FeatureDataset, FeatureMap, FeatureShape, LabelSpace
from idp.errors import EmptyBank, SingularSystem
from idp.numerics import ridge_solve, softmax
from idp.prototypes import (
    PrototypeBank,
    SourceTrainConfig,
    cluster_prototypes,
    init_bank,
    kmeans,
    load_bank,
    load_pool,
    reconstruction_measurement,
    save_bank,
    save_pool,
    train_source_prototypes,
)


def make_bank(classes=3, m=4, d=6, seed=0, lam=0.1):
    rng = np.random.default_rng(seed)
    return PrototypeBank(
        tuple(f"c{i}" for i in range(classes)),
        [rng.standard_normal((m, d)) for _ in range(classes)],
        lam=lam,
    )


class TestInitBank:
    def test_shapes(self):
        labels = LabelSpace(tuple(f"c{i}" for i in range(5)), "source")
        bank = init_bank(labels, FeatureShape(5, 5, 64), 20, np.random.default_rng(0))
        assert len(bank.prototypes) == 5
        assert all(v.shape == (20, 64) for v in bank.prototypes)

    def test_deterministic(self):
        labels = LabelSpace(("a", "b"), "source")
        shape = FeatureShape(2, 2, 8)
        a = init_bank(labels, shape, 3, np.random.default_rng(7))
        b = init_bank(labels, shape, 3, np.random.default_rng(7))
        for va, vb in zip(a.prototypes, b.prototypes):
            np.testing.assert_array_equal(va, vb)

    def test_entry_variance_scales_inverse_d(self):
        d = 50
        labels = LabelSpace(tuple(f"c{i}" for i in range(10)), "source")
        bank = init_bank(labels, FeatureShape(1, 1, d), 25, np.random.default_rng(1))
        entries = np.concatenate([v.ravel() for v in bank.prototypes])
        assert entries.size >= 10_000
        assert abs(entries.var() - 1.0 / d) <= 0.2 / d


class TestReconstructionMeasurement:
    def test_single_class(self):
        bank = make_bank(classes=1)
        probs = reconstruction_measurement(np.random.default_rng(0).standard_normal((4, 6)), bank, 0.1)
        np.testing.assert_allclose(probs, [1.0])

    def test_in_span_class_wins(self):
        rng = np.random.default_rng(3)
        v1 = rng.standard_normal((3, 8))
        v2 = rng.standard_normal((3, 8)) + 10.0
        features = 0.3 * v1[0] + 0.7 * v1[1]
        bank = PrototypeBank(("a", "b"), [v1, v2])
        probs = reconstruction_measurement(features[None, :], bank, 0.0)
        assert probs[0] > probs[1]

    def test_matches_term_by_term_oracle(self):
        """Independent recomputation: per class, closed-form solve, squared
        error normalized by positions, negated, softmax."""
        rng = np.random.default_rng(9)
        features = rng.standard_normal((4, 6))
        bank = make_bank(classes=3, m=5, d=6, seed=1)
        errors = []
        for v in bank.prototypes:
            _, recon = ridge_solve(features, v, 0.2)
            errors.append(np.sum((recon - features) ** 2) / features.shape[0])
        expected = softmax(-np.asarray(errors))
        got = reconstruction_measurement(features, bank, 0.2)
        np.testing.assert_allclose(got, expected, atol=1e-10)

    def test_sums_to_one_and_permutation(self):
        rng = np.random.default_rng(4)
        features = rng.standard_normal((4, 6))
        bank = make_bank(classes=4, d=6, seed=2)
        probs = reconstruction_measurement(features, bank, 0.1)
        assert abs(probs.sum() - 1.0) <= 1e-12
        perm = [2, 0, 3, 1]
        permuted = PrototypeBank(
            tuple(bank.class_names[i] for i in perm),
            [bank.prototypes[i] for i in perm],
        )
        probs_p = reconstruction_measurement(features, permuted, 0.1)
        np.testing.assert_allclose(probs_p, probs[perm], atol=1e-12)

    def test_scale_homogeneity(self):
        """Scaling features and prototypes by s with lambda scaled by s^2
        preserves the argmax."""
        rng = np.random.default_rng(5)
        features = rng.standard_normal((4, 6))
        bank = make_bank(classes=3, d=6, seed=6)
        s = 3.7
        scaled = PrototypeBank(bank.class_names, [s * v for v in bank.prototypes])
        a = reconstruction_measurement(features, bank, 0.1)
        b = reconstruction_measurement(s * features, scaled, 0.1 * s * s)
        assert a.argmax() == b.argmax()

    def test_singular_propagates(self):
        bank = PrototypeBank(("a",), [np.ones((2, 3))])  # rank-1 prototypes
        with pytest.raises(SingularSystem):
            reconstruction_measurement(np.ones((2, 3)), bank, 0.0)


def separable_source(classes=3, per_class=12, shape=FeatureShape(2, 2, 8), seed=0):
    rng = np.random.default_rng(seed)
    names = tuple(f"c{i}" for i in range(classes))
    centers = [4.0 * rng.standard_normal((shape.positions, shape.channels)) for _ in names]
    records = []
    sid = 0
    for label, center in enumerate(centers):
        for _ in range(per_class):
            records.append(FeatureMap(sid, label, center + 0.3 * rng.standard_normal(center.shape)))
            sid += 1
    return FeatureDataset(shape, LabelSpace(names, "source"), records)


class TestTrainSourcePrototypes:
    def test_single_class_loss_is_zero(self):
        """With one class the softmax is identically 1, so every step's
        cross-entropy is exactly -log 1 = 0."""
        ds = separable_source(classes=1, per_class=6, shape=FeatureShape(2, 1, 4))
        _, trace = train_source_prototypes(
            ds, SourceTrainConfig(steps=10, batch_size=4, per_class=2, seed=0)
        )
        assert all(v == 0.0 for v in trace)

    def test_separable_source_reaches_high_accuracy(self):
        ds = separable_source()
        cfg = SourceTrainConfig(learning_rate=0.05, steps=200, batch_size=18, per_class=4, seed=0)
        bank, trace = train_source_prototypes(ds, cfg)
        assert len(trace) == 200
        hits = 0
        for rec in ds.records:
            probs = reconstruction_measurement(rec.data, bank, cfg.lam)
            hits += probs.argmax() == rec.label
        assert hits / len(ds.records) >= 0.95

    def test_deterministic_bitwise(self):
        ds = separable_source(seed=2)
        cfg = SourceTrainConfig(steps=40, batch_size=12, per_class=3, seed=5)
        bank_a, _ = train_source_prototypes(ds, cfg)
        bank_b, _ = train_source_prototypes(ds, cfg)
        for va, vb in zip(bank_a.prototypes, bank_b.prototypes):
            np.testing.assert_array_equal(va, vb)

    def test_loss_gradients_pass_finite_differences(self):
        from idp import numerics as nm
        from idp.prototypes import measurement_logits

        ds = separable_source(classes=3, per_class=2, shape=FeatureShape(2, 1, 4), seed=1)
        batch = np.concatenate([r.data for r in ds.records])
        labels = np.array([r.label for r in ds.records])
        m = 3
        rng = np.random.default_rng(0)
        init = {f"v{i}": rng.standard_normal((m, 4)) for i in range(3)}

        def fn(p):
            return nm.mean_ce_logits(
                measurement_logits(nm.constant(batch), [p[f"v{i}"] for i in range(3)], 0.1, 2),
                labels,
            )

        assert nm.grad_check(fn, init) <= 1e-4


class TestKMeans:
    def test_k_equals_n_distinct_points(self):
        rng = np.random.default_rng(0)
        pts = rng.standard_normal((6, 3))
        result = kmeans(pts, 6, np.random.default_rng(1))
        assert result.objective_trace[-1] <= 1e-12
        got = sorted(map(tuple, result.centroids))
        want = sorted(map(tuple, pts))
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_all_identical_points(self):
        pts = np.tile([1.0, 2.0], (5, 1))
        result = kmeans(pts, 2, np.random.default_rng(0))
        np.testing.assert_allclose(result.centroids[0], [1.0, 2.0])
        assert result.objective_trace[-1] == 0.0

    def test_two_blobs_vs_bruteforce(self):
        """Exhaustive 2-means over all assignments of 12 points."""
        rng = np.random.default_rng(3)
        blob_a = rng.standard_normal((6, 2)) * 0.2 + [5, 0]
        blob_b = rng.standard_normal((6, 2)) * 0.2 + [-5, 0]
        pts = np.concatenate([blob_a, blob_b])

        best_obj, best_centroids = np.inf, None
        for mask in range(1, 2**12 - 1):
            sel = np.array([(mask >> i) & 1 for i in range(12)], dtype=bool)
            ca, cb = pts[sel].mean(axis=0), pts[~sel].mean(axis=0)
            obj = np.sum((pts[sel] - ca) ** 2) + np.sum((pts[~sel] - cb) ** 2)
            if obj < best_obj:
                best_obj, best_centroids = obj, sorted([tuple(ca), tuple(cb)])

        result = kmeans(pts, 2, np.random.default_rng(7))
        got = sorted(map(tuple, result.centroids))
        assert np.abs(np.asarray(got) - np.asarray(best_centroids)).max() <= 0.05

    def test_objective_nonincreasing(self):
        rng = np.random.default_rng(11)
        pts = rng.standard_normal((40, 5))
        result = kmeans(pts, 6, np.random.default_rng(2))
        trace = np.asarray(result.objective_trace)
        assert np.all(np.diff(trace) <= 1e-9)


class TestClusterPrototypes:
    def test_pool_shape_and_provenance(self):
        bank = make_bank(classes=4, m=5, d=6)
        pool = cluster_prototypes(bank, 8, seed=3)
        assert pool.matrix.shape == (8, 6)
        assert pool.source_fingerprint == bank.fingerprint()

    def test_pool_size_cap(self):
        bank = make_bank(classes=2, m=3)
        with pytest.raises(ValueError):
            cluster_prototypes(bank, 7, seed=0)

    def test_empty_bank(self):
        with pytest.raises(EmptyBank):
            cluster_prototypes(PrototypeBank((), [], 0.1), 1, seed=0)


class TestSerialization:
    def test_bank_roundtrip(self, tmp_path):
        bank = make_bank()
        bank.config_fingerprint = "cafe"
        bank.source_fingerprint = "beef"
        path = tmp_path / "bank.idpb"
        save_bank(bank, path)
        again = load_bank(path)
        assert again.class_names == bank.class_names
        assert again.config_fingerprint == "cafe"
        assert again.fingerprint() == bank.fingerprint()
        for va, vb in zip(bank.prototypes, again.prototypes):
            np.testing.assert_array_equal(va.astype(np.float32), vb.astype(np.float32))

    def test_pool_roundtrip(self, tmp_path):
        bank = make_bank(seed=9)
        pool = cluster_prototypes(bank, 6, seed=1)
        path = tmp_path / "pool.idpu"
        save_pool(pool, path)
        again = load_pool(path)
        assert again.pool_size == 6
        assert again.seed == 1
        assert again.source_fingerprint == pool.source_fingerprint
        np.testing.assert_array_equal(
            pool.matrix.astype(np.float32), again.matrix.astype(np.float32)
        )
