"""Finite-difference verification of every analytic gradient path.

The renderer's backward is checked with frozen-set central differences:
discrete choices (visibility winners, clamp branches, pixel membership)
are pinned to their forward-pass values, and any configuration whose
discrete structure would change under the probe step is detected and
resampled, so the comparison targets only the smooth computation.
Projection and loss gradients are smooth and checked directly.
"""

from dataclasses import dataclass

import numpy as np

from .camera import LandmarkSet, ParamVector, project_landmarks, projection_jacobian
from .data import generate_synthetic_dataset, sample_pose
from .losses import build_weights, landmark_loss, param_loss
from .model import generate_synthetic_model
from .network import VisualizationNetwork, default_block_config
from .raster import (RasterConfig, rasterize_backward, rasterize_forward,
                     rerender_frozen, structure_signature)

DEFAULT_THRESHOLDS = {
    "projection": 1e-6,
    "param_loss": 1e-8,
    "landmark_loss": 1e-6,
    "raster": 1e-4,
    "network": 1e-3,
}


@dataclass
class GradReport:
    """Outcome of one gradient-check category."""

    name: str
    max_rel_error: float
    worst_index: int
    trials: int
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.threshold

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return ("%-14s %s  max rel err %.3e (threshold %.0e, worst index %d, %d trials)"
                % (self.name, status, self.max_rel_error, self.threshold,
                   self.worst_index, self.trials))


def _rel_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    floor = max(1e-9, 1e-9 * float(np.max(np.abs(numeric), initial=0.0)))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _step(theta: float) -> float:
    return 1e-4 * max(1.0, abs(theta))


def _random_pose(model, rng, image_size, perturb=0.0):
    params = sample_pose(model, rng, image_size, max_yaw_deg=60.0)
    vec = params.as_vector()
    if perturb:
        vec[:8] += rng.normal(0.0, perturb * np.abs(vec[:8]).mean(), size=8)
    return ParamVector.from_vector(vec, model.n_id, model.n_exp)


def check_projection_jacobian(seed: int = 0, trials: int = 20) -> GradReport:
    """Central differences (step 1e-5) against the analytic projection Jacobian."""
    rng = np.random.default_rng(seed)
    model = generate_synthetic_model(seed + 1, q_target=80, n_id=3, n_exp=2)
    worst, worst_idx = 0.0, -1
    h = 1e-5
    for _ in range(trials):
        params = _random_pose(model, rng, 32, perturb=0.05)
        jac = projection_jacobian(model, params, model.landmark_indices)
        vec = params.as_vector()
        fd = np.zeros_like(jac)
        for k in range(vec.size):
            plus, minus = vec.copy(), vec.copy()
            plus[k] += h
            minus[k] -= h
            pp = project_landmarks(model, ParamVector.from_vector(
                plus, model.n_id, model.n_exp)).points
            pm = project_landmarks(model, ParamVector.from_vector(
                minus, model.n_id, model.n_exp)).points
            fd[:, :, k] = (pp - pm) / (2 * h)
        err = _rel_errors(jac, fd)
        idx = int(np.argmax(err))
        if err.flat[idx] > worst:
            worst, worst_idx = float(err.flat[idx]), idx % vec.size
    return GradReport("projection", worst, worst_idx, trials,
                      DEFAULT_THRESHOLDS["projection"])


def check_param_loss(seed: int = 0, trials: int = 20) -> GradReport:
    """The quadratic parameter loss against central differences."""
    rng = np.random.default_rng(seed)
    model = generate_synthetic_model(seed + 1, q_target=80, n_id=3, n_exp=2)
    samples = [sample_pose(model, rng, 32) for _ in range(8)]
    weights = build_weights(model, samples)
    dim = model.num_params
    worst, worst_idx = 0.0, -1
    for _ in range(trials):
        delta = rng.normal(0.0, 1.0, size=dim)
        target = rng.normal(0.0, 1.0, size=dim)
        _, grad = param_loss(delta, target, weights)
        fd = np.zeros(dim)
        for k in range(dim):
            h = _step(delta[k])
            dp, dm = delta.copy(), delta.copy()
            dp[k] += h
            dm[k] -= h
            fd[k] = (param_loss(dp, target, weights)[0]
                     - param_loss(dm, target, weights)[0]) / (2 * h)
        err = _rel_errors(grad, fd)
        idx = int(np.argmax(err))
        if err[idx] > worst:
            worst, worst_idx = float(err[idx]), idx
    return GradReport("param_loss", worst, worst_idx, trials,
                      DEFAULT_THRESHOLDS["param_loss"])


def check_landmark_loss(seed: int = 0, trials: int = 20) -> GradReport:
    """The landmark loss gradient against central differences."""
    rng = np.random.default_rng(seed)
    model = generate_synthetic_model(seed + 1, q_target=80, n_id=3, n_exp=2)
    dim = model.num_params
    worst, worst_idx = 0.0, -1
    for _ in range(trials):
        params = _random_pose(model, rng, 32)
        truth = _random_pose(model, rng, 32)
        target = project_landmarks(model, truth)
        delta = rng.normal(0.0, 0.1, size=dim)
        _, grad = landmark_loss(model, params, delta, target)
        fd = np.zeros(dim)
        for k in range(dim):
            h = _step(delta[k])
            dp, dm = delta.copy(), delta.copy()
            dp[k] += h
            dm[k] -= h
            fd[k] = (landmark_loss(model, params, dp, target)[0]
                     - landmark_loss(model, params, dm, target)[0]) / (2 * h)
        err = _rel_errors(grad, fd)
        idx = int(np.argmax(err))
        if err[idx] > worst:
            worst, worst_idx = float(err[idx]), idx
    return GradReport("landmark_loss", worst, worst_idx, trials,
                      DEFAULT_THRESHOLDS["landmark_loss"])


def raster_fd_gradient(model, params: ParamVector, cfg: RasterConfig,
                       upstream: np.ndarray, output=None, mask=None):
    """Frozen-set central differences of the render loss, with rejection.

    Returns the finite-difference gradient, or None if any probe step
    changes the discrete render structure (the caller then resamples the
    configuration).
    """
    if output is None:
        output = rasterize_forward(model, params, cfg, mask=mask)
    base_sig = structure_signature(output)
    vec = params.as_vector()
    fd = np.zeros(vec.size)
    for k in range(vec.size):
        h = _step(vec[k])
        values = []
        for sign in (1.0, -1.0):
            probe_vec = vec.copy()
            probe_vec[k] += sign * h
            probe = ParamVector.from_vector(probe_vec, model.n_id, model.n_exp)
            probe_out = rasterize_forward(model, probe, cfg, mask=output.mask)
            if structure_signature(probe_out) != base_sig:
                return None
            image = rerender_frozen(output, model, probe, cfg)
            values.append(float(np.sum(upstream * image)))
        fd[k] = (values[0] - values[1]) / (2 * h)
    return fd


def check_raster_backward(seed: int = 0, trials: int = 20, image_size: int = 24,
                          max_resamples: int = 60) -> GradReport:
    """The renderer backward against frozen-set finite differences."""
    rng = np.random.default_rng(seed)
    model = generate_synthetic_model(seed + 1, q_target=90, n_id=3, n_exp=2)
    cfg = RasterConfig(image_size, image_size, sigma=1.0, support_radius=2)
    worst, worst_idx = 0.0, -1
    done = 0
    attempts = 0
    while done < trials:
        attempts += 1
        if attempts > trials + max_resamples:
            raise RuntimeError("could not find enough stable raster configurations")
        params = _random_pose(model, rng, image_size, perturb=0.03)
        output = rasterize_forward(model, params, cfg)
        if output.entry_pixel.size < 50:
            continue
        upstream = rng.normal(0.0, 1.0, size=(image_size, image_size))
        fd = raster_fd_gradient(model, params, cfg, upstream, output=output)
        if fd is None:
            continue
        analytic = rasterize_backward(output, upstream, model, params, cfg)
        err = _rel_errors(analytic, fd)
        idx = int(np.argmax(err))
        if err[idx] > worst:
            worst, worst_idx = float(err[idx]), idx
        done += 1
    return GradReport("raster", worst, worst_idx, trials,
                      DEFAULT_THRESHOLDS["raster"])


def check_network(seed: int = 0, n_weights: int = 50) -> GradReport:
    """End-to-end check of a tiny two-block network on sampled weights."""
    rng = np.random.default_rng(seed)
    model = generate_synthetic_model(seed + 1, q_target=60, n_id=3, n_exp=2)
    cfg = default_block_config(model, n_blocks=2, image_size=8,
                               dropout_rate=0.0, support_radius=2)
    dataset = generate_synthetic_dataset(model, seed + 2, count=2, image_size=8,
                                         max_yaw_deg=45.0)
    net = VisualizationNetwork(model, cfg, seed=seed + 3)
    # break the zero initialization of the update heads so the check
    # exercises nonzero parameter paths
    for block in net.blocks:
        block.fc2.params["w"][:] = rng.normal(0.0, 0.02,
                                              size=block.fc2.params["w"].shape)

    images = np.stack([s.image for s in dataset])
    from .fitting import initialize_params
    p0 = np.stack([initialize_params(s.bbox, model).as_vector() for s in dataset])
    truth = np.stack([s.params.as_vector() for s in dataset])
    landmarks = [s.landmarks for s in dataset]
    weights = build_weights(model, [s.params for s in dataset])

    fwd = net.forward(images, p0, train=True)
    net_layers = net.layers()
    for layer in net_layers:
        layer.zero_grads()
    net.backward(fwd, truth, landmarks, weights)

    flat = []
    for li, layer in enumerate(net_layers):
        for key in layer.params:
            size = layer.params[key].size
            flat.extend((li, key, i) for i in range(size))
    picks = rng.choice(len(flat), size=min(n_weights, len(flat)), replace=False)

    worst, worst_idx = 0.0, -1
    for pick in picks:
        li, key, i = flat[pick]
        layer = net_layers[li]
        theta = layer.params[key].flat[i]
        analytic = layer.grads[key].flat[i]
        h = _step(theta)
        values = []
        for sign in (1.0, -1.0):
            layer.params[key].flat[i] = theta + sign * h
            replay = net.forward(images, p0, train=True, frozen=fwd)
            loss, _ = net.losses(replay, truth, landmarks, weights)
            values.append(loss)
            layer.params[key].flat[i] = theta
        fd = (values[0] - values[1]) / (2 * h)
        err = float(_rel_errors(np.array([analytic]), np.array([fd]))[0])
        if err > worst:
            worst, worst_idx = err, int(pick)
    return GradReport("network", worst, worst_idx, len(picks),
                      DEFAULT_THRESHOLDS["network"])


def run_all(seed: int = 0, trials: int = 20):
    """Run every category; returns the list of reports."""
    return [
        check_projection_jacobian(seed, trials),
        check_param_loss(seed, trials),
        check_landmark_loss(seed, trials),
        check_raster_backward(seed, trials),
        check_network(seed),
    ]
