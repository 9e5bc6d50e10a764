"""Independent reference implementations used as test oracles."""

import numpy as np

from facevis.camera import project_points
from facevis.model import ShapeModel, compose_shape
from facevis.raster import frontability, select_visible, view_depth


def brute_force_render(model, params, cfg, mask=None):
    """All-pixels-times-all-vertices renderer sharing only the visibility set.

    Gathers contributions per pixel instead of scattering per vertex, so
    the accumulation path is independent of the production renderer.
    """
    if mask is None:
        mask = model.mask
    mask = np.asarray(mask, dtype=float)
    shape = compose_shape(model, params.shape)
    proj = project_points(shape, params.camera)
    g = frontability(model, params.camera)
    depth = view_depth(shape, params.camera)
    visible = select_visible(proj, depth, g)

    r = cfg.support_radius
    image = np.full((cfg.height, cfg.width), float(cfg.background_value))
    for v in range(cfg.height):
        for u in range(cfg.width):
            within = (visible
                      & (np.abs(u - proj[0]) <= r)
                      & (np.abs(v - proj[1]) <= r))
            idx = np.nonzero(within)[0]
            if idx.size == 0:
                continue
            w = np.exp(-((u - proj[0, idx]) ** 2 + (v - proj[1, idx]) ** 2)
                       / (2.0 * cfg.sigma**2))
            sw = w.sum()
            if sw > 0.0:
                image[v, u] = float((w * g[idx] * mask[idx]).sum() / sw)
    return image


def two_vertex_model(near_front: bool, far_front: bool) -> ShapeModel:
    """Two vertices projecting to one pixel cell; vertex 0 is nearer.

    Under the frontal camera, depth is minus z, so the vertex at z=2 is
    closer to the image plane than the one at z=1.  Normals point at or
    away from the camera according to the flags.
    """
    mean = np.array([[2.4, 2.4],
                     [2.6, 2.6],
                     [2.0, 1.0]])
    normals = np.array([[0.0, 0.0],
                        [0.0, 0.0],
                        [1.0 if near_front else -1.0,
                         1.0 if far_front else -1.0]])
    return ShapeModel(
        mean_shape=mean,
        bases_id=np.zeros((1, 3, 2)),
        bases_exp=np.zeros((1, 3, 2)),
        basis_stddev_id=np.ones(1),
        basis_stddev_exp=np.ones(1),
        triangles=np.array([[0, 1, 0]]),
        landmark_indices=np.array([0, 1]),
        nose_tip_index=0,
        sigma_n=1.0,
        mean_normals=normals,
        mask=np.array([1.0, -1.0]),
    )
