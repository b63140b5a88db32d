import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import linear_sum_assignment

from oracles import sinkhorn_linear, swapped_expanded

from anchorgzsl.clustering import (ClusterConfig, PrototypeBank, augment_features, fit_seen_prototypes,
                                   fit_unseen_prototypes, init_unseen_prototypes, match_clusters,
                                   sinkhorn_assign, ssl1_loss, ssl2_loss, swapped_loss)
from anchorgzsl.data import make_synthetic_benchmark
from anchorgzsl.errors import ConfigError, DimensionMismatch, UnknownLabel
from anchorgzsl.numerics import make_rng, normalize_rows


def unit_rows(rng, n, d):
    return normalize_rows(rng.standard_normal((n, d)))[0]


def bank_from(seen, unseen):
    C = np.vstack([seen, unseen])
    n_s = len(seen)
    return PrototypeBank(C, n_s, len(unseen), {i: i for i in range(n_s)}, True)


@pytest.fixture(scope="module")
def bench():
    ds, split = make_synthetic_benchmark(n_per_class=200, seed=0)
    seen = ds.labels < 3
    return ds, seen


class TestAugment:
    def test_identity_augmentation(self):
        X = make_rng(0).standard_normal((5, 8))
        xt, xs = augment_features(X, ClusterConfig(aug_noise_std=0.0, aug_mask_frac=0.0), make_rng(1))
        np.testing.assert_array_equal(xt, normalize_rows(X)[0])
        np.testing.assert_array_equal(xs, xt)

    def test_deterministic(self):
        X = make_rng(0).standard_normal((5, 8))
        a = augment_features(X, ClusterConfig(), make_rng(3))
        b = augment_features(X, ClusterConfig(), make_rng(3))
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u, v)

    def test_mask_count(self):
        X = make_rng(0).random((6, 100)) + 0.5
        cfg = ClusterConfig(aug_noise_std=0.0, aug_mask_frac=0.25)
        for view in augment_features(X, cfg, make_rng(2)):
            np.testing.assert_array_equal(np.sum(view == 0.0, axis=1), 25)
            np.testing.assert_allclose(np.linalg.norm(view, axis=1), 1.0, atol=1e-12)


class TestSinkhorn:
    def test_equal_scores_uniform(self):
        Q = sinkhorn_assign(np.full((3, 4), 0.7), 0.05, 3)
        np.testing.assert_allclose(Q, 1.0 / 12, atol=1e-15)

    def test_diagonal_mass(self):
        Q = sinkhorn_assign(np.array([[10.0, 0.0], [0.0, 10.0]]), 0.05, 10000, tol=1e-12)
        np.testing.assert_allclose(Q, [[0.5, 0.0], [0.0, 0.5]], atol=1e-4)

    def test_fixed_point_stable(self):
        S = make_rng(1).standard_normal((4, 6))
        a = sinkhorn_assign(S, 0.5, 2000)
        b = sinkhorn_assign(S, 0.5, 2001)
        assert np.max(np.abs(a - b)) <= 1e-9

    def test_default_iters_exact_columns(self):
        S = make_rng(2).standard_normal((5, 7))
        Q = sinkhorn_assign(S, 0.05, 3)
        np.testing.assert_allclose(Q.sum(axis=0), 1.0 / 7, rtol=1e-12)

    @given(arrays(np.float64, (3, 5), elements=st.floats(-5, 5)))
    @settings(max_examples=40, deadline=None)
    def test_marginals_at_many_iterations(self, S):
        Q = sinkhorn_assign(S, 0.5, 200)
        assert np.all(Q >= 0)
        np.testing.assert_allclose(Q.sum(axis=1), 1.0 / 3, atol=1e-6)
        np.testing.assert_allclose(Q.sum(axis=0), 1.0 / 5, atol=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_linear_domain_oracle(self, seed):
        S = make_rng(seed, "sk").standard_normal((4, 6))
        Q = sinkhorn_assign(S, 0.5, 100000, tol=1e-12)
        np.testing.assert_allclose(Q, sinkhorn_linear(S, 0.5), atol=1e-6)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            sinkhorn_assign(np.zeros((2, 2)), 0.0, 3)


class TestSwappedLoss:
    def _batch(self, seed, B=4, K=3, d=5):
        rng = make_rng(seed, "swap")
        C, Zt, Zs = unit_rows(rng, K, d), unit_rows(rng, B, d), unit_rows(rng, B, d)
        Qt = sinkhorn_assign(C @ Zt.T, 0.05, 3)
        Qs = sinkhorn_assign(C @ Zs.T, 0.05, 3)
        return Zt, Zs, C, Qt, Qs

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_expanded_form(self, seed):
        Zt, Zs, C, Qt, Qs = self._batch(seed)
        loss = swapped_loss(Zt, Zs, C, Qt, Qs, 0.1)[0]
        assert loss == pytest.approx(swapped_expanded(Zt, Zs, C, Qt, Qs, 0.1), abs=1e-10)

    def test_symmetric_under_view_swap(self):
        Zt, Zs, C, Qt, Qs = self._batch(7)
        a = swapped_loss(Zt, Zs, C, Qt, Qs, 0.1)[0]
        b = swapped_loss(Zs, Zt, C, Qs, Qt, 0.1)[0]
        assert a == pytest.approx(b, abs=1e-13)

    def test_perfect_agreement_limit(self):
        C = np.eye(3)
        Z = C[[0, 1, 2]]
        Q = np.eye(3) / 3
        values = [swapped_loss(Z, Z, C, Q, Q, tau)[0] for tau in (1.0, 0.3, 0.1)]
        assert values[0] > values[1] > values[2] > 0
        assert swapped_loss(Z, Z, C, Q, Q, 0.01)[0] < 1e-12

    def test_shape_checks(self):
        Zt, Zs, C, Qt, Qs = self._batch(0)
        with pytest.raises(DimensionMismatch):
            swapped_loss(Zt, Zs[:3], C, Qt, Qs)
        with pytest.raises(DimensionMismatch):
            swapped_loss(Zt, Zs, C, Qt[:2], Qs)


class TestSsl1:
    def _pair(self, cos):
        seen = np.array([[1.0, 0.0, 0.0]])
        return seen, np.array([[cos, np.sqrt(1 - cos ** 2), 0.0]])

    def test_below_cap(self):
        value, _ = ssl1_loss(bank_from(*self._pair(0.05)), 0.15)
        assert value == pytest.approx(0.05, abs=1e-15)

    def test_cap_active(self):
        value, grad = ssl1_loss(bank_from(*self._pair(0.9)), 0.15)
        assert value == 0.15
        np.testing.assert_array_equal(grad, 0.0)

    def test_mean_of_two_pairs(self):
        seen = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        u = np.array([[0.05, np.sqrt(1 - 0.05 ** 2 - 0.9 ** 2), 0.9]])
        value, _ = ssl1_loss(bank_from(seen, u), 0.15)
        assert value == pytest.approx(0.10, abs=1e-12)

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_never_exceeds_cap(self, seed):
        rng = make_rng(seed)
        value, _ = ssl1_loss(bank_from(unit_rows(rng, 3, 4), unit_rows(rng, 2, 4)), 0.15)
        assert value <= 0.15


class TestSsl2:
    def _setup(self, own, other):
        # sample z = e0, own anchor at cosine `own`, unseen anchor at cosine `other`
        seen = np.array([[own, np.sqrt(1 - own ** 2), 0.0]])
        unseen = np.array([[other, 0.0, np.sqrt(1 - other ** 2)]])
        return np.array([[1.0, 0.0, 0.0]]), [0], bank_from(seen, unseen)

    def test_floor_active(self):
        Z, y, bank = self._setup(0.6, 0.5)
        value, grad = ssl2_loss(Z, y, bank, 0.25)
        assert value == 0.25
        np.testing.assert_array_equal(grad, 0.0)

    def test_above_floor(self):
        Z, y, bank = self._setup(0.8, 0.2)
        assert ssl2_loss(Z, y, bank, 0.25)[0] == pytest.approx(0.6, abs=1e-12)

    def test_own_centroid_orthogonal_unseen(self):
        Z, y, bank = self._setup(1.0, 0.0)
        assert ssl2_loss(Z, y, bank, 0.25)[0] == pytest.approx(1.0, abs=1e-15)

    def test_hinge_form(self):
        Z, y, bank = self._setup(0.6, 0.5)
        assert ssl2_loss(Z, y, bank, 0.25, form="hinge")[0] == pytest.approx(0.15, abs=1e-12)
        Z, y, bank = self._setup(0.8, 0.2)
        assert ssl2_loss(Z, y, bank, 0.25, form="hinge")[0] == 0.0

    def test_unknown_label(self):
        Z, _, bank = self._setup(0.8, 0.2)
        with pytest.raises(UnknownLabel):
            ssl2_loss(Z, [5], bank)

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_never_below_floor(self, seed):
        rng = make_rng(seed)
        bank = bank_from(unit_rows(rng, 3, 4), unit_rows(rng, 2, 4))
        value, _ = ssl2_loss(unit_rows(rng, 6, 4), rng.integers(0, 3, size=6), bank, 0.25)
        assert value >= 0.25


class TestBank:
    def test_round_trip(self):
        bank = bank_from(unit_rows(make_rng(0), 2, 3), unit_rows(make_rng(1), 1, 3))
        back = PrototypeBank.from_dict(bank.to_dict())
        np.testing.assert_array_equal(back.prototypes, bank.prototypes)
        assert back.class_ids() == [0, 1, 2]

    def test_count_mismatch(self):
        with pytest.raises(DimensionMismatch):
            PrototypeBank(np.eye(3), 2, 2, {0: 0, 1: 1})

    def test_match_clusters(self):
        mapping, support = match_clusters([1, 1, 0, 0, 0], [7, 7, 9, 9, 7], 2, [7, 9])
        assert mapping == {0: 9, 1: 7}
        np.testing.assert_array_equal(support, [2, 2])


class TestSeenPhase:
    def test_separated_classes_agree_with_labels(self):
        ds, _ = make_synthetic_benchmark(K=3, n_seen=2, sep_cos_max=0.1, noise_std=0.05, n_per_class=150, seed=4)
        bank = fit_seen_prototypes(ds.features, ds.labels, ClusterConfig(epochs=30), make_rng(0))
        assign = np.argmax(ds.features @ bank.prototypes.T, axis=1)
        pred = np.array([bank.class_map[a] for a in assign])
        assert np.mean(pred == ds.labels) >= 0.95

    def test_single_class_keeps_mean_direction(self):
        X = make_rng(0).standard_normal((80, 6)) * 0.2 + np.array([1.0, 0, 0, 0, 0, 0])
        bank = fit_seen_prototypes(X, np.zeros(80, dtype=int), ClusterConfig(epochs=10), make_rng(1))
        mean = normalize_rows(normalize_rows(X)[0].mean(axis=0, keepdims=True))[0][0]
        assert bank.prototypes[0] @ mean >= 0.99

    def test_deterministic_and_unit(self, bench):
        ds, seen = bench
        cfg = ClusterConfig(epochs=5)
        a = fit_seen_prototypes(ds.features[seen], ds.labels[seen], cfg, make_rng(3))
        b = fit_seen_prototypes(ds.features[seen], ds.labels[seen], cfg, make_rng(3))
        np.testing.assert_array_equal(a.prototypes, b.prototypes)
        np.testing.assert_allclose(np.linalg.norm(a.prototypes, axis=1), 1.0, atol=1e-9)
        assert a.seen_frozen

    def test_projection_head(self, bench):
        ds, seen = bench
        cfg = ClusterConfig(epochs=3, proj_dims=[16, 8])
        bank = fit_seen_prototypes(ds.features[seen], ds.labels[seen], cfg, make_rng(3))
        assert bank.dim == 8 and bank.head is not None
        back = PrototypeBank.from_dict(bank.to_dict())
        np.testing.assert_array_equal(back.embed(ds.features[:4]), bank.embed(ds.features[:4]))


@pytest.fixture(scope="module")
def fitted(bench):
    ds, seen = bench
    cfg = ClusterConfig()
    bank = fit_seen_prototypes(ds.features[seen], ds.labels[seen], cfg, make_rng(0, "s"))
    before = bank.prototypes.copy()
    full = fit_unseen_prototypes(ds.features[~seen], bank, cfg, make_rng(0, "u"), 2,
                                 ds.features[seen], ds.labels[seen])
    return ds, bank, before, full


class TestUnseenPhase:
    def test_seen_block_bitwise_frozen(self, fitted):
        _, bank, before, full = fitted
        np.testing.assert_array_equal(full.seen, before)
        np.testing.assert_array_equal(bank.prototypes, before)

    def test_unit_rows_and_ids(self, fitted):
        _, _, _, full = fitted
        np.testing.assert_allclose(np.linalg.norm(full.prototypes, axis=1), 1.0, atol=1e-9)
        assert full.class_ids()[3:] == [3, 4]

    def test_each_unseen_prototype_nearest_its_own_class(self, fitted):
        ds, _, _, full = fitted
        M = full.unseen @ ds.class_means.T
        rows, cols = linear_sum_assignment(-M[:, 3:])
        for r, c in zip(rows, cols):
            assert np.argmax(M[r]) == 3 + c

    def test_unseen_prototypes_align_with_class_means(self, fitted):
        # Hungarian-matched cosine to the generating means, default configuration
        ds, _, _, full = fitted
        M = full.unseen @ ds.class_means[3:].T
        rows, cols = linear_sum_assignment(-M)
        assert M[rows, cols].min() >= 0.9

    def test_requires_frozen_seen_block(self):
        bank = PrototypeBank(np.eye(2), 2, 0, {0: 0, 1: 1}, seen_frozen=False)
        with pytest.raises(ValueError):
            fit_unseen_prototypes(np.eye(2), bank, ClusterConfig(epochs=1), make_rng(0), 1)

    def test_init_respects_cap(self):
        bank = bank_from(unit_rows(make_rng(0), 3, 8), np.zeros((0, 8)))
        U = init_unseen_prototypes(bank, 4, 0.15, make_rng(1))
        assert np.max(bank.seen @ U.T) < 0.15


class TestConfig:
    @pytest.mark.parametrize("field,value", [("tau", 0.0), ("sigma1", 1.0), ("lambda2", -1.0),
                                             ("ssl2_form", "other"), ("aug_mask_frac", 1.0)])
    def test_invalid(self, field, value):
        with pytest.raises(ConfigError):
            ClusterConfig(**{field: value}).validate()
