"""Loss functions, weight construction, NME and MAPE metrics."""

import numpy as np
import numpy.testing as npt
import pytest

from facevis.camera import CameraMatrix, LandmarkSet, ParamVector
from facevis.data import sample_pose
from facevis.losses import (LossWeights, MetricError, build_weights,
                            format_metrics, landmark_loss, mape, nme,
                            param_loss, write_metrics_csv)
from facevis.model import ModelError, ShapeParams


def make_params(m, p_id, p_exp):
    return ParamVector(CameraMatrix(np.asarray(m, float)),
                       ShapeParams(np.asarray(p_id, float), np.asarray(p_exp, float)))


class TestBuildWeights:
    def test_direct_arithmetic(self, small_model):
        # |rotation| entries all 2, |translations| all 4 -> ratio 0.5
        m = np.array([2.0, -2, 2, 4, -2, 2, -2, -4])
        params = [make_params(m, np.zeros(small_model.n_id),
                              np.zeros(small_model.n_exp))]
        weights = build_weights(small_model, params)
        assert weights.ratio == pytest.approx(0.5)
        npt.assert_allclose(weights.weights[[0, 1, 2, 4, 5, 6]], 2.0)
        npt.assert_allclose(weights.weights[[3, 7]], 1.0)

    def test_unit_stddev_gives_unit_shape_weights(self, small_model):
        m = np.ones(8)
        weights = build_weights(small_model, [make_params(
            m, np.zeros(small_model.n_id), np.zeros(small_model.n_exp))])
        expected = 1.0 / small_model.basis_stddev()
        npt.assert_allclose(weights.weights[8:], expected)

    def test_synthetic_training_set(self, small_model, rng):
        params = [sample_pose(small_model, rng, 32) for _ in range(10)]
        weights = build_weights(small_model, params)
        assert np.all(weights.weights > 0)
        assert np.all(np.isfinite(weights.weights))

    def test_zero_translation_mean_rejected(self, small_model):
        m = np.array([1.0, 0, 0, 0, 0, 1, 0, 0])
        with pytest.raises(ModelError):
            build_weights(small_model, [make_params(
                m, np.zeros(small_model.n_id), np.zeros(small_model.n_exp))])

    def test_empty_training_set_rejected(self, small_model):
        with pytest.raises(ModelError):
            build_weights(small_model, [])


class TestParamLoss:
    def test_zero_error(self, small_model, rng):
        dim = small_model.num_params
        weights = LossWeights(np.abs(rng.normal(size=dim)) + 0.1, 1.0)
        delta = rng.normal(size=dim)
        loss, grad = param_loss(delta, delta, weights)
        assert loss == 0.0
        npt.assert_array_equal(grad, np.zeros(dim))

    def test_identity_weights_unit_error(self, small_model):
        dim = small_model.num_params
        weights = LossWeights(np.ones(dim), 1.0)
        delta = np.zeros(dim)
        target = np.zeros(dim)
        delta[2] = 1.0
        loss, grad = param_loss(delta, target, weights)
        assert loss == pytest.approx(1.0)
        expected = np.zeros(dim)
        expected[2] = 2.0
        npt.assert_allclose(grad, expected)

    def test_gradient_finite_differences(self, small_model, rng):
        dim = small_model.num_params
        weights = LossWeights(np.abs(rng.normal(size=dim)) + 0.1, 1.0)
        delta = rng.normal(size=dim)
        target = rng.normal(size=dim)
        _, grad = param_loss(delta, target, weights)
        h = 1e-6
        for k in range(dim):
            dp, dm = delta.copy(), delta.copy()
            dp[k] += h
            dm[k] -= h
            fd = (param_loss(dp, target, weights)[0]
                  - param_loss(dm, target, weights)[0]) / (2 * h)
            assert abs(grad[k] - fd) <= 1e-8 * max(1.0, abs(fd))

    def test_positive_unless_zero_error(self, small_model, rng):
        dim = small_model.num_params
        weights = LossWeights(np.abs(rng.normal(size=dim)) + 0.1, 1.0)
        err = rng.normal(size=dim)
        loss, _ = param_loss(err, np.zeros(dim), weights)
        assert loss > 0.0

    def test_dimension_mismatch(self, small_model):
        weights = LossWeights(np.ones(small_model.num_params), 1.0)
        with pytest.raises(ModelError):
            param_loss(np.zeros(3), np.zeros(3), weights)


class TestLandmarkLoss:
    def test_zero_at_exact_target(self, small_model, rng):
        params = sample_pose(small_model, rng, 32)
        delta = rng.normal(size=small_model.num_params) * 0.1
        from facevis.camera import project_landmarks
        target = project_landmarks(small_model, params.add(delta))
        loss, grad = landmark_loss(small_model, params, delta, target)
        assert loss == pytest.approx(0.0, abs=1e-18)
        npt.assert_allclose(grad, np.zeros_like(grad), atol=1e-9)

    def test_gradient_finite_differences(self, small_model, rng):
        from facevis.camera import project_landmarks
        for _ in range(3):
            params = sample_pose(small_model, rng, 32)
            truth = sample_pose(small_model, rng, 32)
            target = project_landmarks(small_model, truth)
            delta = rng.normal(size=small_model.num_params) * 0.1
            _, grad = landmark_loss(small_model, params, delta, target)
            for k in range(small_model.num_params):
                h = 1e-4 * max(1.0, abs(delta[k]))
                dp, dm = delta.copy(), delta.copy()
                dp[k] += h
                dm[k] -= h
                fd = (landmark_loss(small_model, params, dp, target)[0]
                      - landmark_loss(small_model, params, dm, target)[0]) / (2 * h)
                denom = max(abs(grad[k]), abs(fd), 1e-9)
                assert abs(grad[k] - fd) / denom < 1e-6

    def test_masking_removes_that_squared_residual(self, small_model, rng):
        from facevis.camera import project_landmarks
        params = sample_pose(small_model, rng, 32)
        target = project_landmarks(small_model, sample_pose(small_model, rng, 32))
        delta = np.zeros(small_model.num_params)
        full_loss, _ = landmark_loss(small_model, params, delta, target)
        predicted = project_landmarks(small_model, params).points
        k = 3
        removed = float(np.sum((predicted[:, k] - target.points[:, k]) ** 2))
        vis = target.visibility.copy()
        vis[k] = False
        masked = LandmarkSet(target.points, vis)
        masked_loss, _ = landmark_loss(small_model, params, delta, masked)
        assert masked_loss == pytest.approx(full_loss - removed, rel=1e-12)


class TestMetrics:
    def make_sets(self, n=5, visible=None):
        truth = LandmarkSet(np.arange(2.0 * n).reshape(2, n),
                            np.ones(n, bool) if visible is None else visible)
        return truth

    def test_nme_zero_when_equal(self):
        truth = self.make_sets()
        est = LandmarkSet(truth.points.copy(), np.ones(truth.count, bool))
        assert nme(est, truth, (0, 0, 10, 10)) == 0.0

    def test_nme_direct_formula(self):
        truth = LandmarkSet(np.array([[10.0], [10.0]]), np.array([True]))
        est = LandmarkSet(np.array([[15.0], [10.0]]), np.array([True]))
        assert nme(est, truth, (0, 0, 100, 100)) == pytest.approx(5.0)

    def test_invisible_landmarks_excluded(self):
        vis = np.array([True, True, False])
        truth = LandmarkSet(np.zeros((2, 3)), vis)
        est_pts = np.zeros((2, 3))
        est_pts[0, 2] = 1e6  # perturbing an invisible landmark changes nothing
        est = LandmarkSet(est_pts, np.ones(3, bool))
        assert nme(est, truth, (0, 0, 4, 4)) == 0.0
        assert mape(est, truth) == 0.0

    def test_nme_scale_invariance(self, rng):
        n = 6
        truth_pts = rng.uniform(0, 50, size=(2, n))
        est_pts = truth_pts + rng.normal(size=(2, n))
        vis = np.ones(n, bool)
        bbox = (5.0, 7.0, 40.0, 30.0)
        base = nme(LandmarkSet(est_pts, vis), LandmarkSet(truth_pts, vis), bbox)
        s = 3.7
        scaled = nme(LandmarkSet(est_pts * s, vis), LandmarkSet(truth_pts * s, vis),
                     (bbox[0] * s, bbox[1] * s, bbox[2] * s, bbox[3] * s))
        assert scaled == pytest.approx(base, rel=1e-12)

    def test_mape_345(self):
        truth = LandmarkSet(np.array([[0.0], [0.0]]), np.array([True]))
        est = LandmarkSet(np.array([[3.0], [4.0]]), np.array([True]))
        assert mape(est, truth) == pytest.approx(5.0)

    def test_mape_nme_relation_all_visible(self, rng):
        n = 8
        truth_pts = rng.uniform(0, 50, size=(2, n))
        est_pts = truth_pts + rng.normal(size=(2, n))
        vis = np.ones(n, bool)
        truth = LandmarkSet(truth_pts, vis)
        est = LandmarkSet(est_pts, vis)
        bbox = (0.0, 0.0, 30.0, 20.0)
        lhs = mape(est, truth)
        rhs = nme(est, truth, bbox) * np.sqrt(30.0 * 20.0) / 100.0
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_no_visible_landmarks_error(self):
        truth = LandmarkSet(np.zeros((2, 3)), np.zeros(3, bool))
        est = LandmarkSet(np.zeros((2, 3)), np.ones(3, bool))
        with pytest.raises(MetricError):
            nme(est, truth, (0, 0, 4, 4))
        with pytest.raises(MetricError):
            mape(est, truth)


class TestMetricOutput:
    def test_format_metrics_lines(self):
        text = format_metrics({"nme": 4.456789, "faces": 20})
        assert "nme: 4.45679" in text
        assert "faces: 20" in text
        assert text.endswith("\n")

    def test_csv_round_trip(self, tmp_path):
        rows = [{"epoch": 0, "block": 1, "loss": 1.5, "nme": 20.0},
                {"epoch": 0, "block": 2, "loss": 1.1, "nme": 18.0}]
        path = tmp_path / "metrics.csv"
        write_metrics_csv(path, rows)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,block,loss,nme"
        assert len(lines) == 3
