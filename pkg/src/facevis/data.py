"""Synthetic dataset generation and the per-face annotation file format.

Dataset samples are self-consistent: the "photograph" of each face is the
renderer's own visualization of the true parameters, so ground truth is
exact and the learning problem is well posed without any external data.
"""

import json
from dataclasses import dataclass

import numpy as np

from .camera import CameraMatrix, LandmarkSet, ParamVector, landmark_visibility, project_all
from .model import ModelError, ShapeModel, ShapeParams, compose_shape
from .raster import RasterConfig, rasterize_forward


@dataclass
class FaceSample:
    """One synthetic face: image, bounding box, landmarks and true state."""

    image: np.ndarray            # (H, W)
    bbox: tuple                  # (x, y, w, h)
    landmarks: LandmarkSet       # truth positions with truth visibility
    params: ParamVector          # ground-truth parameters


def _rotation(yaw: float, pitch: float, roll: float) -> np.ndarray:
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return rz @ ry @ rx


def sample_pose(model: ShapeModel, rng: np.random.Generator, image_size: int,
                max_yaw_deg: float = 90.0) -> ParamVector:
    """Draw a random valid weak-perspective pose with the face in frame.

    Yaw spans up to +-90 degrees, in-plane roll +-45 and pitch +-30; the
    scale is set from the rotated shape extent so the projected face spans
    a 0.55..0.70 fraction of the image, with a small translation jitter.
    """
    pid = rng.normal(0.0, model.basis_stddev_id)
    pexp = rng.normal(0.0, model.basis_stddev_exp)
    pid = np.clip(pid, -2 * model.basis_stddev_id, 2 * model.basis_stddev_id)
    pexp = np.clip(pexp, -2 * model.basis_stddev_exp, 2 * model.basis_stddev_exp)
    shape_params = ShapeParams(pid, pexp)

    yaw = np.deg2rad(rng.uniform(-max_yaw_deg, max_yaw_deg))
    pitch = np.deg2rad(rng.uniform(-30.0, 30.0))
    roll = np.deg2rad(rng.uniform(-45.0, 45.0))
    rot = _rotation(yaw, pitch, roll)

    shape = compose_shape(model, shape_params)
    rotated = rot @ shape
    extent = max(rotated[0].max() - rotated[0].min(),
                 rotated[1].max() - rotated[1].min())
    scale = rng.uniform(0.55, 0.70) * image_size / extent

    m = np.empty(8)
    m[0:3] = scale * rot[0]
    m[4:7] = scale * rot[1]
    center = image_size / 2.0 + rng.uniform(-0.05, 0.05, size=2) * image_size
    proj_centroid = scale * (rot[:2] @ shape.mean(axis=1))
    m[3] = center[0] - proj_centroid[0]
    m[7] = center[1] - proj_centroid[1]
    return ParamVector(CameraMatrix(m), shape_params)


def tight_bbox(model: ShapeModel, params: ParamVector) -> tuple:
    """Bounding box of all projected vertices, as (x, y, w, h)."""
    proj = project_all(model, params)
    x0, y0 = proj.min(axis=1)
    x1, y1 = proj.max(axis=1)
    return (float(x0), float(y0), float(x1 - x0), float(y1 - y0))


def generate_synthetic_dataset(model: ShapeModel, seed: int, count: int,
                               image_size: int = 32, sigma: float = 1.0,
                               support_radius: int = 2,
                               max_yaw_deg: float = 90.0):
    """Render ``count`` synthetic faces with exact ground truth.

    Deterministic per seed.  Each sample records the visualization image
    of the true parameters (the photograph stand-in), the tight bounding
    box, the projected landmarks and their visibility flags.
    """
    rng = np.random.default_rng(seed)
    cfg = RasterConfig(width=image_size, height=image_size, sigma=sigma,
                       support_radius=support_radius)
    samples = []
    for _ in range(count):
        params = sample_pose(model, rng, image_size, max_yaw_deg=max_yaw_deg)
        out = rasterize_forward(model, params, cfg)
        points = project_all(model, params)[:, model.landmark_indices]
        vis = landmark_visibility(model, params)
        samples.append(FaceSample(
            image=out.image,
            bbox=tight_bbox(model, params),
            landmarks=LandmarkSet(points, vis),
            params=params,
        ))
    return samples


# ---------------------------------------------------------------------------
# Annotation file format (one face per file)
# ---------------------------------------------------------------------------


def save_annotation(path, bbox, landmarks: LandmarkSet,
                    params: ParamVector | None = None,
                    image_path: str | None = None) -> None:
    """Write one face annotation: bbox, landmarks, visibility, optional truth."""
    obj = {
        "bbox": [float(v) for v in bbox],
        "landmarks": np.asarray(landmarks.points).T.tolist(),
        "visibility": [bool(v) for v in landmarks.visibility],
    }
    if image_path is not None:
        obj["image"] = image_path
    if params is not None:
        obj["params"] = {
            "m": params.camera.m.tolist(),
            "p_id": params.shape.identity.tolist(),
            "p_exp": params.shape.expression.tolist(),
        }
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)


def load_annotation(path):
    """Read an annotation file; returns (bbox, LandmarkSet, params or None, image or None)."""
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelError("unparseable annotation file %s: %s" % (path, exc)) from exc
    for key in ("bbox", "landmarks", "visibility"):
        if key not in obj:
            raise ModelError("annotation file missing field '%s'" % key)
    bbox = tuple(float(v) for v in obj["bbox"])
    if len(bbox) != 4:
        raise ModelError("annotation bbox must have 4 entries")
    points = np.asarray(obj["landmarks"], dtype=float).T
    landmarks = LandmarkSet(points, np.asarray(obj["visibility"], dtype=bool))
    params = None
    if "params" in obj:
        blob = obj["params"]
        params = ParamVector(
            CameraMatrix(np.asarray(blob["m"], dtype=float)),
            ShapeParams(np.asarray(blob["p_id"], dtype=float),
                        np.asarray(blob["p_exp"], dtype=float)),
        )
    return bbox, landmarks, params, obj.get("image")
