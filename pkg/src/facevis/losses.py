"""Training losses and evaluation metrics.

Two losses drive the alignment stack: a diagonally weighted quadratic on
parameter updates and a Euclidean loss on reprojected landmarks whose
gradient chains through the projection.  Metrics are the bounding-box
normalized mean landmark error (percent) and the raw mean pixel error,
both over visible landmarks only.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .camera import (LandmarkSet, ParamVector, ROTATION_INDICES,
                     TRANSLATION_INDICES, project_landmarks, projection_jacobian)
from .model import ModelError, ShapeModel


class MetricError(ValueError):
    """Metric preconditions violated (e.g. no visible landmarks)."""


@dataclass
class LossWeights:
    """Diagonal weights for the parameter-update loss.

    Translation entries are weighted 1, scaled-rotation entries 1/ratio,
    and each shape coefficient by the inverse of its standard deviation.
    """

    weights: np.ndarray
    ratio: float


def build_weights(model: ShapeModel, training_params) -> LossWeights:
    """Derive loss weights from the model and a training parameter set.

    The ratio is mean absolute scaled-rotation entry over mean absolute
    translation entry across the training set.
    """
    vectors = [p.as_vector() if isinstance(p, ParamVector) else np.asarray(p, float)
               for p in training_params]
    if not vectors:
        raise ModelError("training parameter set is empty")
    stacked = np.stack(vectors)
    rot_mean = float(np.mean(np.abs(stacked[:, list(ROTATION_INDICES)])))
    trans_mean = float(np.mean(np.abs(stacked[:, list(TRANSLATION_INDICES)])))
    if trans_mean == 0.0:
        raise ModelError("translation entries average to zero; ratio undefined")
    ratio = rot_mean / trans_mean

    stddev = model.basis_stddev()
    if np.any(stddev <= 0.0):
        raise ModelError("basis standard deviations must be positive")
    weights = np.empty(model.num_params)
    weights[list(ROTATION_INDICES)] = 1.0 / ratio
    weights[list(TRANSLATION_INDICES)] = 1.0
    weights[8:] = 1.0 / stddev
    return LossWeights(weights=weights, ratio=ratio)


def param_loss(delta, delta_target, weights: LossWeights):
    """Weighted quadratic loss on a parameter update and its gradient.

    loss = e^T W e with e = delta - delta_target; gradient = 2 W e.
    """
    delta = np.asarray(delta, dtype=float)
    target = np.asarray(delta_target, dtype=float)
    if delta.shape != target.shape or delta.shape != weights.weights.shape:
        raise ModelError("parameter update, target and weights must share one length")
    err = delta - target
    loss = float(err @ (weights.weights * err))
    grad = 2.0 * weights.weights * err
    return loss, grad


def landmark_loss(model: ShapeModel, params: ParamVector, delta,
                  target: LandmarkSet):
    """Euclidean landmark loss at the updated parameters, with gradient.

    loss = sum over visible target landmarks of the squared coordinate
    residuals of the projection at params + delta; the gradient over the
    update chains the residuals through the projection derivatives.
    """
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (model.num_params,):
        raise ModelError("parameter update has the wrong length")
    if target.count != model.num_landmarks:
        raise ModelError("target landmark count does not match the model")
    updated = params.add(delta)
    predicted = project_landmarks(model, updated).points
    residual = predicted - target.points
    vis = target.visibility
    residual = residual * vis[None, :]
    loss = float(np.sum(residual**2))
    jac = projection_jacobian(model, updated, model.landmark_indices)
    grad = 2.0 * (jac[0].T @ residual[0] + jac[1].T @ residual[1])
    return loss, grad


def _visible_errors(estimated: LandmarkSet, truth: LandmarkSet) -> np.ndarray:
    if estimated.count != truth.count:
        raise MetricError("landmark sets have different sizes")
    vis = truth.visibility
    if not np.any(vis):
        raise MetricError("no visible landmarks to evaluate")
    diff = estimated.points[:, vis] - truth.points[:, vis]
    return np.linalg.norm(diff, axis=0)


def nme(estimated: LandmarkSet, truth: LandmarkSet, bbox) -> float:
    """Mean visible-landmark error normalized by sqrt(bbox area), percent."""
    x, y, w, h = bbox
    if w <= 0 or h <= 0:
        raise MetricError("bounding box must have positive size")
    errors = _visible_errors(estimated, truth)
    return 100.0 * float(errors.mean()) / math.sqrt(w * h)


def mape(estimated: LandmarkSet, truth: LandmarkSet) -> float:
    """Mean visible-landmark pixel error, unnormalized."""
    return float(_visible_errors(estimated, truth).mean())


def format_metrics(metrics: dict) -> str:
    """Render metrics as 'key: value' lines for logs and CLI output."""
    lines = []
    for key, value in metrics.items():
        if isinstance(value, float):
            lines.append("%s: %.6g" % (key, value))
        else:
            lines.append("%s: %s" % (key, value))
    return "\n".join(lines) + "\n"


def write_metrics_csv(path, rows, fieldnames=None) -> None:
    """Write metric dict rows to a CSV file with a header."""
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
