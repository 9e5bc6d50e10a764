"""Recover camera and shape parameters from labeled 2D landmarks.

The objective is the Euclidean landmark loss over the visible landmarks.
Because the projection is linear in the camera entries, fitting
alternates an exact least-squares solve for the camera with backtracking
gradient steps on the shape coefficients, starting from a frontal pose
sized to the face bounding box.
"""

from dataclasses import dataclass

import numpy as np

from .camera import CameraMatrix, LandmarkSet, ParamVector, project_points
from .losses import nme
from .model import ShapeModel, ShapeParams, compose_shape


class FitError(RuntimeError):
    """Ill-posed fitting input or a diverged optimization."""


@dataclass
class FitOptions:
    max_iters: int = 200
    tol: float = 1e-12            # relative loss-change stopping threshold
    p_steps: int = 6              # gradient steps on shape coeffs per outer iteration
    regularize: bool = False      # Tikhonov prior on shape coeffs for noisy labels
    reg_weight: float = 1e-3


def initialize_params(bbox, model: ShapeModel) -> ParamVector:
    """Frontal initialization sized and centered to the bounding box.

    The scale makes the mean-shape x extent span 0.9 of the box width and
    the translations place the projected mean-shape centroid at the box
    center; shape coefficients start at zero.
    """
    x, y, w, h = bbox
    if w <= 0 or h <= 0:
        raise FitError("bounding box must have positive size")
    extent = float(model.mean_shape[0].max() - model.mean_shape[0].min())
    scale = 0.9 * w / extent
    centroid = model.mean_shape.mean(axis=1)
    tx = x + w / 2.0 - scale * centroid[0]
    ty = y + h / 2.0 - scale * centroid[1]
    return ParamVector(CameraMatrix.identity(scale, tx, ty), ShapeParams.zeros(model))


def _solve_camera(shape_lm: np.ndarray, target: np.ndarray) -> CameraMatrix:
    """Exact least-squares camera given the current 3D landmark positions."""
    design = np.concatenate([shape_lm.T, np.ones((shape_lm.shape[1], 1))], axis=1)
    sol_x, _, _, _ = np.linalg.lstsq(design, target[0], rcond=None)
    sol_y, _, _, _ = np.linalg.lstsq(design, target[1], rcond=None)
    m = np.concatenate([sol_x, sol_y])
    return CameraMatrix(m)


def fit_landmarks(model: ShapeModel, target: LandmarkSet, bbox,
                  opts: FitOptions | None = None):
    """Fit camera and shape parameters to the visible target landmarks.

    Returns the best parameters found and the final normalized error
    against the target.  Requires at least four visible landmarks (the
    camera alone has eight degrees of freedom).
    """
    if opts is None:
        opts = FitOptions()
    if target.count != model.num_landmarks:
        raise FitError("target landmark count does not match the model")
    vis = np.nonzero(target.visibility)[0]
    if vis.size < 4:
        raise FitError(
            "need at least 4 visible landmarks, got %d (ill-posed)" % vis.size)

    lm_idx = model.landmark_indices[vis]
    observed = target.points[:, vis]
    bases = model.all_bases()[:, :, lm_idx]       # (K, 3, n)
    mean_lm = model.mean_shape[:, lm_idx]
    stddev = model.basis_stddev()

    params = initialize_params(bbox, model)
    p = params.shape.full
    camera = params.camera

    def shape_at(p_vec):
        return mean_lm + np.tensordot(p_vec, bases, axes=(0, 0))

    def loss_at(camera_, p_vec):
        res = project_points(shape_at(p_vec), camera_) - observed
        value = float(np.sum(res**2))
        if opts.regularize:
            value += opts.reg_weight * float(np.sum((p_vec / stddev) ** 2))
        return value, res

    loss, residual = loss_at(camera, p)
    step = 1.0
    for iteration in range(opts.max_iters):
        prev_loss = loss

        camera = _solve_camera(shape_at(p), observed)
        loss, residual = loss_at(camera, p)

        # gradient of the loss w.r.t. p:  d(proj)/dp_k = (m1 . B_k, m2 . B_k)
        jx = np.tensordot(camera.row1, bases, axes=(0, 1))   # (K, n)
        jy = np.tensordot(camera.row2, bases, axes=(0, 1))
        for _ in range(opts.p_steps):
            grad = 2.0 * (jx @ residual[0] + jy @ residual[1])
            if opts.regularize:
                grad += 2.0 * opts.reg_weight * p / stddev**2
            gnorm2 = float(grad @ grad)
            if gnorm2 == 0.0:
                break
            step = min(step * 2.0, 1e6)
            while True:
                candidate = p - step * grad
                cand_loss, cand_res = loss_at(camera, candidate)
                if cand_loss <= loss - 1e-4 * step * gnorm2:
                    p, loss, residual = candidate, cand_loss, cand_res
                    break
                step *= 0.5
                if step < 1e-18:
                    break
            if step < 1e-18:
                break

        if not np.isfinite(loss):
            raise FitError("fit diverged at iteration %d" % iteration)
        if prev_loss - loss < opts.tol * max(1.0, loss):
            break

    fitted = ParamVector(camera, ShapeParams.from_full(p, model.n_id, model.n_exp))
    predicted = LandmarkSet(
        project_points(compose_shape(model, fitted.shape)[:, model.landmark_indices],
                       camera),
        np.ones(model.num_landmarks, dtype=bool))
    return fitted, nme(predicted, target, bbox)


def jitter_bbox(bbox, seed: int, count: int = 20):
    """Deterministic bounding-box jitter for data augmentation.

    Each variation offsets the location uniformly within 10 percent of the
    box size and rescales width and height uniformly in [0.9, 1.1].
    """
    if count < 1:
        raise FitError("count must be at least 1")
    x, y, w, h = bbox
    rng = np.random.default_rng(seed)
    boxes = []
    for _ in range(count):
        dx = rng.uniform(-0.1, 0.1) * w
        dy = rng.uniform(-0.1, 0.1) * h
        sw = rng.uniform(0.9, 1.1)
        sh = rng.uniform(0.9, 1.1)
        boxes.append((x + dx, y + dy, w * sw, h * sh))
    return boxes
