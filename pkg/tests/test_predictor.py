import math
import tempfile
import unittest
from pathlib import Path

import numpy as np
from pydantic import ValidationError
from scipy import ndimage

from core.features import FeatureVector, extract_features, feature_names
from core.metrics import PredictionSet, srcc
from core.predictor import (
    EnsembleModel,
    RidgeModel,
    SavedModel,
    alpha_search,
    build_ensemble,
    default_alpha_grid,
    ensemble_predict,
    load_model,
    multi_sample_predict,
    pseudo_label_finetune,
    ridge_fit,
    sample_view_sets,
    save_model,
    select_columns,
    view_set_hash,
)
from core.seeding import derive_seed
from core.views import GridSampleSpec, IdentityView, Image, ResizeView, ViewSet, reseed
from shared.errors import DegenerateTargets, EmptyUnlabeled, MissingFeature, ModelIntegrityError, TooFewRows

_TRUE_WEIGHTS = np.array([0.5, -0.3, 0.2, 0.1])
_TRUE_BIAS = 0.4


def _linear_data(n, seed=0, d=4):
    rng = np.random.default_rng(seed)
    X = rng.normal(0.0, 1.0, (n, d))
    return X, X @ _TRUE_WEIGHTS[:d] + _TRUE_BIAS


def _fixed_ridge(names, weights, bias=0.0):
    return RidgeModel(
        feature_names=list(names),
        weights=list(weights),
        bias=bias,
        alpha=1.0,
        feature_means=[0.0] * len(names),
        feature_stds=[1.0] * len(names),
    )


def _noise_image(size=64, seed=0):
    rng = np.random.default_rng(seed)
    return Image(pixels=rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8))


class TestRidgeFit(unittest.TestCase):
    def test_realizable_target(self):
        X, y = _linear_data(40)
        model = ridge_fit(X, y, alpha=1e-6)
        residual = model.predict_matrix(X, ["x0", "x1", "x2", "x3"]) - y
        self.assertLess(np.max(np.abs(residual)), 1e-6)

    def test_huge_alpha_predicts_mean(self):
        X, y = _linear_data(40, seed=1)
        model = ridge_fit(X, y, alpha=1e12)
        np.testing.assert_allclose(model.weights, 0.0, atol=1e-8)
        np.testing.assert_allclose(model.predict_matrix(X, ["x0", "x1", "x2", "x3"]), y.mean(), atol=1e-6)

    def test_matches_gradient_descent(self):
        rng = np.random.default_rng(2)
        X = rng.normal(0.0, 1.0, (40, 6))
        y = rng.normal(0.0, 1.0, 40)
        alpha = 0.5

        Z = (X - X.mean(axis=0)) / X.std(axis=0)
        A = np.column_stack([np.ones(40), Z])
        P = alpha * np.eye(7)
        P[0, 0] = 0.0
        H = 2 * (A.T @ A + P)
        step = 1.0 / np.linalg.eigvalsh(H).max()
        theta = np.zeros(7)
        for _ in range(20000):
            theta -= step * (2 * A.T @ (A @ theta - y) + 2 * P @ theta)

        model = ridge_fit(X, y, alpha)
        self.assertAlmostEqual(model.bias, theta[0], delta=1e-6)
        np.testing.assert_allclose(model.weights, theta[1:], atol=1e-6)

    def test_constant_columns_are_dropped(self):
        X, y = _linear_data(30, seed=3, d=2)
        X = np.column_stack([X[:, 0], np.full(30, 7.0), X[:, 1]])
        model = ridge_fit(X, y, alpha=1e-3, names=["a", "flat", "b"])

        self.assertEqual(model.feature_names, ["a", "b"])
        self.assertEqual(model.dropped_features, ["flat"])
        vector = FeatureVector(names=("flat", "b", "a"), values=(7.0, X[0, 2], X[0, 0]))
        self.assertAlmostEqual(model.predict(vector), y[0], delta=1e-3)

    def test_constant_targets(self):
        X, _ = _linear_data(10)
        model = ridge_fit(X, np.full(10, 0.6), alpha=1.0)
        self.assertTrue(model.degenerate)
        self.assertEqual(model.bias, 0.6)
        self.assertEqual(model.weights, [0.0] * 4)
        with self.assertRaises(DegenerateTargets):
            ridge_fit(X, np.full(10, 0.6), alpha=1.0, allow_constant=False)

    def test_sample_weights(self):
        X, y = _linear_data(20, seed=4)
        doubled = ridge_fit(np.vstack([X, X[:5]]), np.concatenate([y, y[:5]]), alpha=2.0)
        weighted = ridge_fit(X, y, alpha=2.0, sample_weight=[2.0] * 5 + [1.0] * 15)
        np.testing.assert_allclose(weighted.weights, doubled.weights, atol=1e-10)
        self.assertAlmostEqual(weighted.bias, doubled.bias, delta=1e-10)

    def test_input_errors(self):
        X, y = _linear_data(10)
        with self.assertRaises(TooFewRows):
            ridge_fit(X[:1], y[:1], alpha=1.0)
        with self.assertRaises(ValueError):
            ridge_fit(X, y, alpha=0.0)
        with self.assertRaises(ValueError):
            ridge_fit(X, y[:9], alpha=1.0)
        with self.assertRaises(ValueError):
            ridge_fit(X, y, alpha=1.0, names=["a"])


class TestAlphaSearch(unittest.TestCase):
    def test_default_grid(self):
        grid = default_alpha_grid()
        self.assertEqual(len(grid), 13)
        self.assertTrue(math.isclose(grid[0], 1e-6, rel_tol=1e-12))
        self.assertTrue(math.isclose(grid[-1], 1e6, rel_tol=1e-12))
        self.assertTrue(all(b > a for a, b in zip(grid, grid[1:])))

    def test_noiseless_data_picks_smallest_alpha(self):
        X, y = _linear_data(50, seed=5)
        model, alpha = alpha_search(X, y)
        self.assertEqual(alpha, default_alpha_grid()[0])
        self.assertEqual(model.alpha, alpha)

    def test_seeded_holdout_is_reproducible(self):
        rng = np.random.default_rng(6)
        X = rng.normal(0.0, 1.0, (30, 3))
        y = rng.normal(0.0, 1.0, 30)
        first = alpha_search(X, y, seed=11)
        second = alpha_search(X, y, seed=11)
        self.assertEqual(first, second)

    def test_kfold(self):
        X, y = _linear_data(25, seed=7)
        model, alpha = alpha_search(X, y, grid=[1e-3, 1.0, 1e3], folds=5)
        self.assertEqual(alpha, 1e-3)
        self.assertEqual(len(model.weights), 4)

    def test_too_few_rows(self):
        X, y = _linear_data(2)
        with self.assertRaises(TooFewRows):
            alpha_search(X, y)
        with self.assertRaises(ValueError):
            alpha_search(X, y, grid=[])

    def test_monotone_single_feature_ranks_perfectly(self):
        rng = np.random.default_rng(8)
        x_train = rng.uniform(0.0, 1.0, (60, 1))
        x_test = rng.uniform(0.0, 1.0, (20, 1))
        model, _ = alpha_search(x_train, 0.2 + 0.5 * x_train[:, 0])
        predictions = model.predict_matrix(x_test, ["x0"])
        self.assertEqual(srcc(PredictionSet.from_arrays(predictions, 0.2 + 0.5 * x_test[:, 0])), 1.0)

    def test_blur_corpus_ranks_held_out_images(self):
        rng = np.random.default_rng(12)
        view_set = ViewSet(name="identity", views=[IdentityView()])
        sigmas = rng.uniform(0.3, 2.5, 200)
        rows = []
        for k, sigma in enumerate(sigmas):
            pixels = _noise_image(48, seed=100 + k).pixels.astype(np.float64)
            blurred = ndimage.gaussian_filter(pixels, sigma=(sigma, sigma, 0))
            img = Image(pixels=np.clip(np.rint(blurred), 0, 255).astype(np.uint8))
            rows.append(extract_features(img, view_set).values)
        X = np.asarray(rows)
        mos = 1.0 - sigmas / 3.0
        names = feature_names(view_set)

        model, _ = alpha_search(X[:150], mos[:150], names=names, seed=4)
        predictions = model.predict_matrix(X[150:], names)

        self.assertGreaterEqual(srcc(PredictionSet.from_arrays(predictions, mos[150:])), 0.9)


class TestEnsemble(unittest.TestCase):
    def test_single_member(self):
        member = _fixed_ridge(["a", "b"], [1.0, 2.0], bias=0.5)
        vector = FeatureVector(names=("a", "b"), values=(0.3, 0.1))
        self.assertEqual(ensemble_predict(EnsembleModel(members=[member]), vector), member.predict(vector))

    def test_identical_members(self):
        member = _fixed_ridge(["a"], [3.0], bias=-1.0)
        ensemble = EnsembleModel(members=[member, member], member_weights=[0.5, 0.5])
        vector = FeatureVector(names=("a",), values=(0.25,))
        self.assertAlmostEqual(ensemble.predict(vector), member.predict(vector), places=12)

    def test_weighted_sum_over_feature_subsets(self):
        names = ["f1", "f2", "f3", "f4", "f5"]
        members = [
            _fixed_ridge(names[:4], [1.0, 1.0, 1.0, 1.0]),
            _fixed_ridge(names[1:], [1.0, 0.0, 0.0, 2.0], bias=1.0),
            _fixed_ridge(["f1", "f3", "f4", "f5"], [0.5, 0.5, 0.5, 0.5]),
            _fixed_ridge(["f1", "f2", "f4", "f5"], [-1.0, 0.0, 0.0, 0.0]),
            _fixed_ridge(["f1", "f2", "f3", "f5"], [0.0, 0.0, 0.0, 4.0]),
        ]
        ensemble = EnsembleModel(members=members, member_weights=[2, 1, 1, 0, 0])
        x = FeatureVector(names=tuple(names), values=(1.0, 2.0, 3.0, 4.0, 5.0))

        # member outputs 10, 1 + 2 + 10 = 13, 0.5 * 13 = 6.5
        expected = (2 * 10.0 + 13.0 + 6.5) / 4
        self.assertAlmostEqual(ensemble.predict(x), expected, places=12)
        self.assertEqual(ensemble.member_weights, [0.5, 0.25, 0.25, 0.0, 0.0])
        self.assertEqual(ensemble.required_features(), ["f1", "f2", "f3", "f4", "f5"])

        X = np.array([[1.0, 2.0, 3.0, 4.0, 5.0]])
        self.assertAlmostEqual(ensemble.predict_matrix(X, names)[0], expected, places=12)

    def test_weight_validation(self):
        member = _fixed_ridge(["a"], [1.0])
        with self.assertRaises(ValidationError):
            EnsembleModel(members=[member], member_weights=[-1.0])
        with self.assertRaises(ValidationError):
            EnsembleModel(members=[member, member], member_weights=[0.0, 0.0])
        with self.assertRaises(ValidationError):
            EnsembleModel(members=[member], member_weights=[0.5, 0.5])
        with self.assertRaises(ValidationError):
            EnsembleModel(members=[])

    def test_family_ensemble(self):
        view_set = ViewSet(name="one", views=[ResizeView(w=8, h=8)])
        names = feature_names(view_set)
        rng = np.random.default_rng(9)
        X = rng.normal(0.0, 1.0, (30, len(names)))
        y = X[:, 0] - 0.5 * X[:, 4] + 1.0

        ensemble = build_ensemble(X, y, names, group_by="family", alpha_grid=[1e-4, 1.0])

        self.assertEqual(len(ensemble.members), 5)
        self.assertEqual(ensemble.member_weights, [0.2] * 5)
        self.assertEqual(ensemble.members[0].feature_names, names)
        self.assertEqual(len(ensemble.members[1].feature_names), 4)
        self.assertNotIn("v0.resize.colorfulness", ensemble.members[3].feature_names)

    def test_view_ensemble(self):
        view_set = ViewSet(name="two", views=[ResizeView(w=8, h=8), ResizeView(w=4, h=4)])
        names = feature_names(view_set)
        rng = np.random.default_rng(10)
        X = rng.normal(0.0, 1.0, (30, len(names)))
        y = X @ rng.normal(0.0, 1.0, len(names))

        ensemble = build_ensemble(X, y, names, group_by="view", alpha_grid=[1e-3], weights=[1, 1, 2])

        self.assertEqual([len(m.feature_names) for m in ensemble.members], [8, 8, 16])
        self.assertEqual(ensemble.member_weights, [0.25, 0.25, 0.5])
        with self.assertRaises(ValueError):
            build_ensemble(X, y, names, group_by="encoder")

    def test_select_columns(self):
        X = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(select_columns(X, ["a", "b", "c"], ["c", "a"]), [[2.0, 0.0], [5.0, 3.0]])
        with self.assertRaises(MissingFeature):
            select_columns(X, ["a", "b", "c"], ["d"])


class TestMultiSample(unittest.TestCase):
    def setUp(self):
        self.stochastic = ViewSet(name="grid", views=[GridSampleSpec(grid_n=2, fragment_n=8)])
        names = feature_names(self.stochastic)
        self.model = _fixed_ridge(names, np.linspace(0.1, 0.8, len(names)))
        self.img = _noise_image()

    def test_single_sample(self):
        expected = self.model.predict(
            extract_features(self.img, reseed(self.stochastic, derive_seed(3, "sample", 0)))
        )
        self.assertEqual(multi_sample_predict(self.model, self.img, self.stochastic, samples=1, seed=3), expected)

    def test_deterministic_view_set(self):
        view_set = ViewSet(name="resize", views=[ResizeView(w=16, h=16)])
        model = _fixed_ridge(feature_names(view_set), [1.0] * 8)
        single = model.predict(extract_features(self.img, view_set))
        self.assertEqual(len(sample_view_sets(view_set, 7, seed=0)), 1)
        self.assertAlmostEqual(multi_sample_predict(model, self.img, view_set, samples=7), single, places=12)

    def test_mean_of_reseeded_predictions(self):
        predictions = [
            self.model.predict(extract_features(self.img, reseed(self.stochastic, derive_seed(5, "sample", k))))
            for k in range(10)
        ]
        averaged = multi_sample_predict(self.model, self.img, self.stochastic, samples=10, seed=5)
        self.assertAlmostEqual(averaged, float(np.mean(predictions)), places=12)
        pooled = multi_sample_predict(self.model, self.img, self.stochastic, samples=10, seed=5, workers=4)
        self.assertEqual(pooled, averaged)

    def test_samples_must_be_positive(self):
        with self.assertRaises(ValueError):
            sample_view_sets(self.stochastic, 0, seed=0)


class TestPseudoLabels(unittest.TestCase):
    def setUp(self):
        self.names = ["x0", "x1", "x2", "x3"]
        self.X_l, self.y_l = _linear_data(10, seed=11)
        self.X_u, _ = _linear_data(100, seed=12)
        self.oracle = _fixed_ridge(self.names, _TRUE_WEIGHTS, bias=_TRUE_BIAS)
        self.student = ridge_fit(self.X_l, self.y_l, alpha=5.0, names=self.names)

    def test_empty_unlabeled_set(self):
        empty = np.zeros((0, 4))
        refit = pseudo_label_finetune(self.student, self.X_l, self.y_l, empty, self.oracle, self.names)
        self.assertEqual(refit, ridge_fit(self.X_l, self.y_l, alpha=5.0, names=self.names))
        with self.assertRaises(EmptyUnlabeled):
            pseudo_label_finetune(self.student, self.X_l, self.y_l, empty, self.oracle, self.names, strict=True)

    def test_zero_pseudo_weight(self):
        refit = pseudo_label_finetune(
            self.student, self.X_l, self.y_l, self.X_u, self.oracle, self.names, pseudo_weight=0.0
        )
        self.assertEqual(refit, ridge_fit(self.X_l, self.y_l, alpha=5.0, names=self.names))

    def test_oracle_teacher_does_not_hurt(self):
        X_test, y_test = _linear_data(50, seed=13)
        refit = pseudo_label_finetune(self.student, self.X_l, self.y_l, self.X_u, self.oracle, self.names)

        def holdout_rmse(model):
            return float(np.sqrt(np.mean((model.predict_matrix(X_test, self.names) - y_test) ** 2)))

        self.assertLessEqual(holdout_rmse(refit), holdout_rmse(self.student))
        self.assertEqual(refit.alpha, 5.0)

    def test_negative_weight(self):
        with self.assertRaises(ValueError):
            pseudo_label_finetune(
                self.student, self.X_l, self.y_l, self.X_u, self.oracle, self.names, pseudo_weight=-1.0
            )


class TestSavedModel(unittest.TestCase):
    def setUp(self):
        self.view_set = ViewSet(name="grid", views=[GridSampleSpec(grid_n=2, fragment_n=8, seed=4)])
        names = feature_names(self.view_set)
        self.model = EnsembleModel(
            members=[_fixed_ridge(names, [1.0] * 8), _fixed_ridge(names[:4], [0.5] * 4, bias=0.1)]
        )

    def test_save_and_load(self):
        saved = SavedModel.wrap(self.model, self.view_set)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "model.json"
            save_model(saved, path)
            loaded = load_model(path)
        self.assertEqual(loaded, saved)
        self.assertIsInstance(loaded.model, EnsembleModel)

    def test_hash_tracks_view_set(self):
        self.assertEqual(len(view_set_hash(self.view_set)), 64)
        self.assertEqual(view_set_hash(self.view_set), view_set_hash(self.view_set.model_copy()))
        self.assertNotEqual(view_set_hash(self.view_set), view_set_hash(reseed(self.view_set, 1)))

    def test_tampered_view_set(self):
        saved = SavedModel.wrap(self.model, self.view_set)
        tampered = saved.model_copy(update={"view_set": reseed(self.view_set, 99)})
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "model.json"
            save_model(tampered, path)
            with self.assertRaises(ModelIntegrityError):
                load_model(path)


if __name__ == "__main__":
    unittest.main()
