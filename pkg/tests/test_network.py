"""Visualization-block stack: wiring, gradient flow, checkpoints."""

import numpy as np
import numpy.testing as npt
import pytest

from facevis.data import generate_synthetic_dataset
from facevis.fitting import initialize_params
from facevis.losses import build_weights
from facevis.model import generate_synthetic_model
from facevis.network import (BlockConfig, TrainConfig, TrainingError,
                             VisualizationNetwork, default_block_config,
                             evaluate, load_checkpoint, save_checkpoint,
                             train_toy)


@pytest.fixture(scope="module")
def tiny_model():
    return generate_synthetic_model(2, q_target=60, n_id=3, n_exp=2)


@pytest.fixture(scope="module")
def tiny_data(tiny_model):
    return generate_synthetic_dataset(tiny_model, 4, 6, 16, max_yaw_deg=45.0)


def forward_inputs(model, dataset):
    images = np.stack([s.image for s in dataset])
    p0 = np.stack([initialize_params(s.bbox, model).as_vector() for s in dataset])
    truth = np.stack([s.params.as_vector() for s in dataset])
    landmarks = [s.landmarks for s in dataset]
    return images, p0, truth, landmarks


class TestForward:
    def test_zero_initialized_heads_give_identity_network(self, tiny_model, tiny_data):
        cfg = default_block_config(tiny_model, n_blocks=3, image_size=16)
        net = VisualizationNetwork(tiny_model, cfg, seed=0)
        images, p0, _, _ = forward_inputs(tiny_model, tiny_data)
        fwd = net.forward(images, p0, train=False)
        for stage in fwd.params_per_block:
            npt.assert_array_equal(stage, p0)

    def test_additive_update_chain(self, tiny_model, tiny_data, rng):
        cfg = default_block_config(tiny_model, n_blocks=2, image_size=16)
        net = VisualizationNetwork(tiny_model, cfg, seed=0)
        for block in net.blocks:
            block.fc2.params["w"][:] = rng.normal(0, 0.02,
                                                  size=block.fc2.params["w"].shape)
        images, p0, _, _ = forward_inputs(tiny_model, tiny_data)
        fwd = net.forward(images, p0, train=False)
        prev = p0
        for cache in fwd.blocks:
            npt.assert_allclose(cache.p_out, prev + cache.delta, atol=0)
            prev = cache.p_out

    def test_variant_channel_counts(self, tiny_model):
        channels = {}
        for variant in ("IFV", "FV", "IV"):
            cfg = default_block_config(tiny_model, n_blocks=2, image_size=16,
                                       input_variant=variant)
            net = VisualizationNetwork(tiny_model, cfg, seed=0)
            channels[variant] = net.blocks[1].convs[0][0].params["w"].shape[1]
        assert channels["IV"] < channels["IFV"]
        assert channels["FV"] == channels["IFV"] - 1
        assert channels["IV"] == 2

    def test_deterministic_without_dropout(self, tiny_model, tiny_data):
        cfg = default_block_config(tiny_model, n_blocks=2, image_size=16,
                                   dropout_rate=0.0)
        net = VisualizationNetwork(tiny_model, cfg, seed=3)
        images, p0, _, _ = forward_inputs(tiny_model, tiny_data)
        a = net.forward(images, p0, train=False)
        b = net.forward(images, p0, train=False)
        for ca, cb in zip(a.blocks, b.blocks):
            npt.assert_array_equal(ca.p_out, cb.p_out)
            npt.assert_array_equal(ca.v_images, cb.v_images)

    def test_single_block_reduces(self, tiny_model, tiny_data):
        cfg = default_block_config(tiny_model, n_blocks=1, image_size=16)
        net = VisualizationNetwork(tiny_model, cfg, seed=0)
        images, p0, _, _ = forward_inputs(tiny_model, tiny_data)
        fwd = net.forward(images, p0, train=False)
        assert len(fwd.blocks) == 1
        assert fwd.renders_per_block[0].shape == (len(tiny_data), 16, 16)


class TestBackward:
    def _grads_snapshot(self, net):
        return [{k: v.copy() for k, v in layer.grads.items()}
                for layer in net.layers()]

    def _setup(self, tiny_model, tiny_data, seed=7):
        rng = np.random.default_rng(seed)
        cfg = default_block_config(tiny_model, n_blocks=2, image_size=16,
                                   dropout_rate=0.0)
        net = VisualizationNetwork(tiny_model, cfg, seed=seed)
        for block in net.blocks:
            block.fc2.params["w"][:] = rng.normal(0, 0.02,
                                                  size=block.fc2.params["w"].shape)
        images, p0, truth, landmarks = forward_inputs(tiny_model, tiny_data)
        weights = build_weights(tiny_model, [s.params for s in tiny_data])
        return net, images, p0, truth, landmarks, weights

    def test_detaching_parameter_path_changes_block1_gradients(self, tiny_model,
                                                               tiny_data):
        net, images, p0, truth, landmarks, weights = self._setup(
            tiny_model, tiny_data)
        fwd = net.forward(images, p0, train=True)

        for layer in net.layers():
            layer.zero_grads()
        net.backward(fwd, truth, landmarks, weights)
        full = self._grads_snapshot(net)

        for layer in net.layers():
            layer.zero_grads()
        net.backward(fwd, truth, landmarks, weights, detach_params=True)
        detached = self._grads_snapshot(net)

        block1_layers = len(net.blocks[0].layers())
        diff = 0.0
        for li in range(block1_layers):
            for key in full[li]:
                diff = max(diff, float(np.max(np.abs(full[li][key]
                                                     - detached[li][key]))))
        assert diff > 0.0

    def test_render_path_distinct_from_identity_path(self, tiny_model, tiny_data):
        """Detaching only the renderer gradient must also change block-1
        gradients, showing the renderer really carries gradient."""
        net, images, p0, truth, landmarks, weights = self._setup(
            tiny_model, tiny_data)
        fwd = net.forward(images, p0, train=True)

        for layer in net.layers():
            layer.zero_grads()
        net.backward(fwd, truth, landmarks, weights)
        full = self._grads_snapshot(net)

        for layer in net.layers():
            layer.zero_grads()
        net.backward(fwd, truth, landmarks, weights, detach_render=True)
        no_render = self._grads_snapshot(net)

        block1_layers = len(net.blocks[0].layers())
        diff = 0.0
        for li in range(block1_layers):
            for key in full[li]:
                diff = max(diff, float(np.max(np.abs(full[li][key]
                                                     - no_render[li][key]))))
        assert diff > 0.0

    def test_loss_weight_schedule_scales_linearly(self, tiny_model, tiny_data):
        net, images, p0, truth, landmarks, weights = self._setup(
            tiny_model, tiny_data)
        fwd = net.forward(images, p0, train=True)

        def grads_with_schedule(schedule):
            net.cfg.loss_schedule = schedule
            for layer in net.layers():
                layer.zero_grads()
            net.backward(fwd, truth, landmarks, weights)
            return self._grads_snapshot(net)

        base = net.cfg.loss_schedule
        g10 = grads_with_schedule([(base[0][0], 1.0), (base[1][0], 0.0)])
        g01 = grads_with_schedule([(base[0][0], 0.0), (base[1][0], 1.0)])
        g23 = grads_with_schedule([(base[0][0], 2.0), (base[1][0], 3.0)])
        net.cfg.loss_schedule = base
        for li in range(len(g10)):
            for key in g10[li]:
                combo = 2.0 * g10[li][key] + 3.0 * g01[li][key]
                npt.assert_allclose(g23[li][key], combo, rtol=1e-9, atol=1e-9)


class TestTraining:
    def test_smoke_run_and_metrics(self, tiny_model, tiny_data):
        cfg = default_block_config(tiny_model, n_blocks=2, image_size=16)
        hyper = TrainConfig(epochs=2, batch_size=4, lr=1e-6, seed=0)
        net, history = train_toy(tiny_model, tiny_data, tiny_data[:3], cfg, hyper)
        assert len(history) == 2 * 2
        for row in history:
            assert set(row) == {"epoch", "block", "loss", "nme"}
            assert np.isfinite(row["loss"])

    def test_seed_reproducibility(self, tiny_model, tiny_data):
        cfg = default_block_config(tiny_model, n_blocks=2, image_size=16)
        hyper = TrainConfig(epochs=2, batch_size=4, lr=1e-6, seed=5)
        _, h1 = train_toy(tiny_model, tiny_data, tiny_data[:3], cfg, hyper)
        _, h2 = train_toy(tiny_model, tiny_data, tiny_data[:3], cfg, hyper)
        assert h1 == h2

    def test_divergence_detected(self, tiny_model, tiny_data):
        cfg = default_block_config(tiny_model, n_blocks=2, image_size=16)
        hyper = TrainConfig(epochs=3, batch_size=4, lr=1e6, seed=0)
        with pytest.raises(TrainingError):
            train_toy(tiny_model, tiny_data, tiny_data[:3], cfg, hyper)

    def test_empty_training_set_rejected(self, tiny_model):
        cfg = default_block_config(tiny_model, n_blocks=2, image_size=16)
        with pytest.raises(TrainingError):
            train_toy(tiny_model, [], [], cfg, TrainConfig(epochs=1))


class TestEvaluateAndCheckpoints:
    def test_evaluate_block_zero_is_initialization(self, tiny_model, tiny_data):
        cfg = default_block_config(tiny_model, n_blocks=2, image_size=16)
        net = VisualizationNetwork(tiny_model, cfg, seed=0)
        rows = evaluate(net, tiny_data)
        assert rows[0]["block"] == 0
        # identity network: all blocks equal the initialization metrics
        for row in rows[1:]:
            assert row["nme"] == pytest.approx(rows[0]["nme"])

    def test_truth_initialization_reports_zero(self, tiny_model, tiny_data):
        cfg = default_block_config(tiny_model, n_blocks=2, image_size=16)
        net = VisualizationNetwork(tiny_model, cfg, seed=0)
        p0 = np.stack([s.params.as_vector() for s in tiny_data])
        rows = evaluate(net, tiny_data, p0=p0)
        assert rows[0]["nme"] == pytest.approx(0.0, abs=1e-9)

    def test_checkpoint_round_trip(self, tiny_model, tiny_data, tmp_path, rng):
        cfg = default_block_config(tiny_model, n_blocks=2, image_size=16)
        net = VisualizationNetwork(tiny_model, cfg, seed=1)
        for layer in net.layers():
            for key in layer.params:
                layer.params[key] += rng.normal(0, 0.01, size=layer.params[key].shape)
        path = tmp_path / "weights.npz"
        save_checkpoint(net, path)
        loaded = load_checkpoint(path, tiny_model)
        images, p0, _, _ = forward_inputs(tiny_model, tiny_data)
        a = net.forward(images, p0, train=False)
        b = loaded.forward(images, p0, train=False)
        for ca, cb in zip(a.blocks, b.blocks):
            npt.assert_array_equal(ca.p_out, cb.p_out)

    def test_checkpoint_shape_mismatch_rejected(self, tiny_model, tmp_path):
        cfg = default_block_config(tiny_model, n_blocks=2, image_size=16)
        net = VisualizationNetwork(tiny_model, cfg, seed=1)
        path = tmp_path / "weights.npz"
        save_checkpoint(net, path)
        other_model = generate_synthetic_model(9, q_target=60, n_id=4, n_exp=2)
        with pytest.raises(TrainingError):
            load_checkpoint(path, other_model)
