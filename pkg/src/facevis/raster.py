"""Differentiable splat renderer for the face model.

The renderer projects model vertices into the image, keeps the vertices
facing the camera (positive frontability), resolves per-pixel-cell depth
contests, and splats mask-weighted frontability values with a truncated
Gaussian kernel.  The forward pass records exactly which vertex
contributes to which pixel; the backward pass differentiates the smooth
part of the computation analytically with respect to every camera and
shape parameter while holding the recorded discrete structure fixed.
"""

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraMatrix, ParamVector, project_points, projection_jacobian
from .model import ModelError, ShapeModel, compose_shape

_CAMERA_ROTATION_COLS = np.array([0, 1, 2, 4, 5, 6])


class RasterError(ValueError):
    """Invalid renderer input or a forward record that does not match."""


@dataclass
class RasterConfig:
    """Geometry of the output image and of the splatting kernel.

    ``support_radius`` bounds the Chebyshev distance (in pixels) between a
    pixel and a projected vertex for the vertex to contribute there, i.e.
    the Gaussian kernel is truncated to a square window.
    """

    width: int
    height: int
    sigma: float = 1.0
    support_radius: int = 2
    background_value: float = 0.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise RasterError("image dimensions must be positive")
        if self.sigma <= 0:
            raise RasterError("sigma must be positive")
        if self.support_radius < 1:
            raise RasterError("support_radius must be at least 1")


@dataclass
class VisualizationOutput:
    """Rendered image plus the frozen per-pixel contribution record.

    ``entry_pixel``/``entry_vertex``/``entry_weight`` form a flat list of
    (pixel, vertex, kernel weight) contributions in vertex-major order;
    ``weight_sum`` is the per-pixel kernel normalizer.  The record, the
    visible set and the clamp-active set define the discrete structure
    that the backward pass and frozen re-renders keep fixed.
    """

    image: np.ndarray               # (H, W)
    weight_sum: np.ndarray          # (H, W)
    entry_pixel: np.ndarray         # (E,) flat pixel index v * W + u
    entry_vertex: np.ndarray        # (E,)
    entry_weight: np.ndarray        # (E,)
    visible: np.ndarray             # (Q,) bool
    clamp_active: np.ndarray        # (Q,) bool, frontability strictly positive pre-clamp
    frontability: np.ndarray        # (Q,) post-clamp values
    projected: np.ndarray           # (2, Q)
    mask: np.ndarray = field(repr=False, default=None)  # (Q,) weighting used
    params_vector: np.ndarray = field(repr=False, default=None)
    config: RasterConfig = None

    def contributors(self, u: int, v: int):
        """List of (vertex index, kernel weight, frontability) at pixel (u, v)."""
        sel = self.entry_pixel == v * self.config.width + u
        return [
            (int(q), float(w), float(self.frontability[q]))
            for q, w in zip(self.entry_vertex[sel], self.entry_weight[sel])
        ]


@dataclass
class VisualizationGradients:
    """Per-pixel derivative maps of the rendered image.

    ``d_camera[k]`` is the (H, W) derivative image for camera entry k and
    ``d_shape[j]`` the one for shape coefficient j.  Pixels without
    contributors are exactly zero.
    """

    d_camera: np.ndarray  # (8, H, W)
    d_shape: np.ndarray   # (n_id + n_exp, H, W)


def frontability(model: ShapeModel, camera: CameraMatrix) -> np.ndarray:
    """Per-vertex measure of how much the surface faces the camera.

    The viewing direction is the cross product of the two camera rows
    scaled by the product of their norms; the measure is its dot product
    with the mean-shape vertex normals, clamped to zero from below.  For a
    valid weak-perspective camera the result lies in [0, 1].
    """
    pre, _ = _frontability_raw(model, camera)
    return np.maximum(pre, 0.0)


def _frontability_raw(model: ShapeModel, camera: CameraMatrix):
    m1, m2 = camera.row1, camera.row2
    n1 = np.linalg.norm(m1)
    n2 = np.linalg.norm(m2)
    if n1 == 0.0 or n2 == 0.0:
        raise RasterError("camera rotation row has zero norm; view direction undefined")
    direction = np.cross(m1, m2) / (n1 * n2)
    return direction @ model.mean_normals, direction


def frontability_camera_jacobian(model: ShapeModel, camera: CameraMatrix) -> np.ndarray:
    """Derivatives of frontability w.r.t. the six scaled-rotation entries.

    Returns (Q, 6) ordered as [m1, m2, m3, m5, m6, m7].  Rows of clamped
    vertices (pre-clamp value <= 0) are zero, matching the subgradient
    used by the backward pass.
    """
    m1, m2 = camera.row1, camera.row2
    n1 = np.linalg.norm(m1)
    n2 = np.linalg.norm(m2)
    if n1 == 0.0 or n2 == 0.0:
        raise RasterError("camera rotation row has zero norm; view direction undefined")
    pre, direction = _frontability_raw(model, camera)
    norms = model.mean_normals

    # rows i: d(m1 x m2)/dm1_i = e_i x m2 and d(m1 x m2)/dm2_i = m1 x e_i
    eye = np.eye(3)
    cross1 = np.stack([np.cross(eye[i], m2) for i in range(3)])
    cross2 = np.stack([np.cross(m1, eye[i]) for i in range(3)])

    jac = np.empty((model.num_vertices, 6))
    jac[:, 0:3] = (cross1 @ norms).T / (n1 * n2) - np.outer(pre, m1) / n1**2
    jac[:, 3:6] = (cross2 @ norms).T / (n1 * n2) - np.outer(pre, m2) / n2**2
    jac[pre <= 0.0] = 0.0
    return jac


def view_depth(shape: np.ndarray, camera: CameraMatrix) -> np.ndarray:
    """Per-vertex depth along the camera axis; smaller means nearer.

    The axis is the third row of the rotation obtained by orthonormalizing
    (row1, row2), negated so that for the frontal camera the depth of a
    vertex is minus its z coordinate.
    """
    r1 = camera.row1 / np.linalg.norm(camera.row1)
    m2o = camera.row2 - (camera.row2 @ r1) * r1
    n2 = np.linalg.norm(m2o)
    if n2 == 0.0:
        raise RasterError("camera rotation rows are collinear; depth axis undefined")
    r3 = np.cross(r1, m2o / n2)
    return -(r3 @ np.asarray(shape, dtype=float))


def select_visible(projected: np.ndarray, depth: np.ndarray,
                   g: np.ndarray) -> np.ndarray:
    """Approximate visibility: prune back-facing vertices and resolve cells.

    Vertices with zero frontability are excluded outright.  Among vertices
    whose projections round to the same integer pixel cell only the one
    with the smallest depth survives (ties broken by vertex index).
    """
    q = g.shape[0]
    visible = np.zeros(q, dtype=bool)
    cand = np.nonzero(g > 0.0)[0]
    if cand.size == 0:
        return visible
    cx = np.rint(projected[0, cand]).astype(np.int64)
    cy = np.rint(projected[1, cand]).astype(np.int64)
    key = (cy - cy.min()) * (cx.max() - cx.min() + 1) + (cx - cx.min())
    order = np.lexsort((cand, depth[cand], key))
    sorted_key = key[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = sorted_key[1:] != sorted_key[:-1]
    visible[cand[order[first]]] = True
    return visible


def _splat_entries(projected: np.ndarray, visible: np.ndarray, cfg: RasterConfig):
    """Enumerate (pixel, vertex) pairs within the truncated kernel support.

    Entries come out vertex-major (ascending vertex index, then row-major
    pixels), which fixes the per-pixel accumulation order.
    """
    idx = np.nonzero(visible)[0]
    x = projected[0, idx]
    y = projected[1, idx]
    r = cfg.support_radius
    x0 = np.maximum(np.ceil(x - r).astype(np.int64), 0)
    x1 = np.minimum(np.floor(x + r).astype(np.int64), cfg.width - 1)
    y0 = np.maximum(np.ceil(y - r).astype(np.int64), 0)
    y1 = np.minimum(np.floor(y + r).astype(np.int64), cfg.height - 1)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = nx * ny
    keep = counts > 0
    idx, x, y, x0, y0, nx, ny, counts = (
        a[keep] for a in (idx, x, y, x0, y0, nx, ny, counts))
    total = int(counts.sum())
    if total == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, np.empty(0), np.empty(0)

    vert = np.repeat(np.arange(idx.size), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    intra = np.arange(total) - np.repeat(offsets, counts)
    u = x0[vert] + intra % nx[vert]
    v = y0[vert] + intra // nx[vert]
    du = u - x[vert]
    dv = v - y[vert]
    weight = np.exp(-(du**2 + dv**2) / (2.0 * cfg.sigma**2))
    return v * cfg.width + u, idx[vert], weight, (du, dv)


def rasterize_forward(model: ShapeModel, params: ParamVector, cfg: RasterConfig,
                      mask: np.ndarray | None = None) -> VisualizationOutput:
    """Render the visualization image and record its contribution structure.

    Each pixel is the kernel-weighted average of frontability times mask
    weight over the visible vertices within the kernel support; pixels
    with no contributors (or whose kernel weights all underflow to zero)
    hold the background value.  ``mask`` overrides the model's standard
    per-vertex weighting (pass ones for an unmasked render).
    """
    if mask is None:
        mask = model.mask
    mask = np.asarray(mask, dtype=float)
    if mask.shape != (model.num_vertices,):
        raise RasterError("mask length must equal the vertex count")

    shape = compose_shape(model, params.shape)
    projected = project_points(shape, params.camera)
    if not np.all(np.isfinite(projected)):
        raise RasterError("projected coordinates are not finite")
    pre, _ = _frontability_raw(model, params.camera)
    g = np.maximum(pre, 0.0)
    depth = view_depth(shape, params.camera)
    visible = select_visible(projected, depth, g)

    pix, vert, weight, _ = _splat_entries(projected, visible, cfg)
    npix = cfg.height * cfg.width
    numer = np.bincount(pix, weights=weight * (g * mask)[vert], minlength=npix)
    denom = np.bincount(pix, weights=weight, minlength=npix)
    image = np.full(npix, float(cfg.background_value))
    filled = denom > 0.0
    image[filled] = numer[filled] / denom[filled]

    return VisualizationOutput(
        image=image.reshape(cfg.height, cfg.width),
        weight_sum=denom.reshape(cfg.height, cfg.width),
        entry_pixel=pix,
        entry_vertex=vert,
        entry_weight=weight,
        visible=visible,
        clamp_active=pre > 0.0,
        frontability=g,
        projected=projected,
        mask=mask,
        params_vector=params.as_vector(),
        config=cfg,
    )


def _check_record(output: VisualizationOutput, params: ParamVector, cfg: RasterConfig):
    if output.config != cfg:
        raise RasterError("forward record was produced with a different raster config")
    if output.params_vector.shape != (params.dim,) or not np.array_equal(
            output.params_vector, params.as_vector()):
        raise RasterError("forward record does not match the given parameters")


def _entry_coefficients(output: VisualizationOutput, upstream: np.ndarray,
                        cfg: RasterConfig):
    """Shared per-entry chain-rule coefficients for the backward passes.

    For entry e = (pixel p, vertex q, weight w) and V = N/W per pixel:
      dV/dw_e = (g_q a_q - V_p) / W_p   and   dV/dg_q via a_q w / W_p,
    with dw/d(x, y) = w * (u - x, v - y) / sigma^2.
    """
    up = np.asarray(upstream, dtype=float)
    if up.shape != (cfg.height, cfg.width):
        raise RasterError("upstream gradient must match the image dimensions")
    denom = output.weight_sum.reshape(-1)
    valid = denom > 0.0
    scale = np.zeros_like(denom)
    scale[valid] = up.reshape(-1)[valid] / denom[valid]

    pix = output.entry_pixel
    vert = output.entry_vertex
    w = output.entry_weight
    ga = output.frontability * output.mask
    per_entry = scale[pix]
    coef_w = per_entry * (ga[vert] - output.image.reshape(-1)[pix])
    coef_g = per_entry * output.mask[vert] * w

    u = (pix % cfg.width).astype(float)
    v = (pix // cfg.width).astype(float)
    inv_s2 = 1.0 / cfg.sigma**2
    alpha = coef_w * w * (u - output.projected[0, vert]) * inv_s2
    beta = coef_w * w * (v - output.projected[1, vert]) * inv_s2
    return vert, alpha, beta, coef_g


def rasterize_backward(output: VisualizationOutput, upstream: np.ndarray,
                       model: ShapeModel, params: ParamVector,
                       cfg: RasterConfig) -> np.ndarray:
    """Contract an upstream image gradient down to the parameter vector.

    Returns sum over pixels of upstream * dV/dtheta for every theta in
    [m1..m8, identity, expression].  Frontability depends only on the
    scaled-rotation entries (mean-shape normals are held fixed, so its
    shape gradient is zero, and clamped vertices get subgradient zero);
    kernel weights depend on all parameters through the projection.  The
    visibility set and pixel membership recorded at forward time are
    frozen: no gradient flows through the discrete selection.
    """
    _check_record(output, params, cfg)
    vert, alpha, beta, coef_g = _entry_coefficients(output, upstream, cfg)
    q = model.num_vertices

    acc_x = np.bincount(vert, weights=alpha, minlength=q)
    acc_y = np.bincount(vert, weights=beta, minlength=q)
    acc_g = np.bincount(vert, weights=coef_g, minlength=q)

    jac = projection_jacobian(model, params)
    grad = jac[0].T @ acc_x + jac[1].T @ acc_y
    dgdm = frontability_camera_jacobian(model, params.camera)
    grad[_CAMERA_ROTATION_COLS] += dgdm.T @ acc_g
    return grad


def gradient_maps(output: VisualizationOutput, model: ShapeModel,
                  params: ParamVector, cfg: RasterConfig) -> VisualizationGradients:
    """Full per-pixel derivative images of the render w.r.t. each parameter.

    Contracting these maps against an upstream gradient reproduces
    :func:`rasterize_backward`; they exist for analysis and debugging.
    """
    _check_record(output, params, cfg)
    ones = np.ones((cfg.height, cfg.width))
    vert, alpha, beta, coef_g = _entry_coefficients(output, ones, cfg)
    pix = output.entry_pixel
    npix = cfg.height * cfg.width
    dim = model.num_params

    jac = projection_jacobian(model, params)
    dgdm = frontability_camera_jacobian(model, params.camera)
    per_entry = jac[0][vert] * alpha[:, None] + jac[1][vert] * beta[:, None]
    per_entry[:, _CAMERA_ROTATION_COLS] += dgdm[vert] * coef_g[:, None]

    maps = np.zeros((dim, npix))
    for k in range(dim):
        maps[k] = np.bincount(pix, weights=per_entry[:, k], minlength=npix)
    maps = maps.reshape(dim, cfg.height, cfg.width)
    return VisualizationGradients(d_camera=maps[:8], d_shape=maps[8:])


def rerender_frozen(output: VisualizationOutput, model: ShapeModel,
                    params: ParamVector, cfg: RasterConfig) -> np.ndarray:
    """Re-evaluate the render at new parameters with the structure frozen.

    The contribution record, visibility set and clamp branches all stay as
    recorded; only kernel weights and frontability values are recomputed.
    This is exactly the smooth function whose derivative
    :func:`rasterize_backward` returns, so central differences of it
    verify the analytic gradients.
    """
    if output.config != cfg:
        raise RasterError("forward record was produced with a different raster config")
    shape = compose_shape(model, params.shape)
    projected = project_points(shape, params.camera)
    pre, _ = _frontability_raw(model, params.camera)
    g = np.where(output.clamp_active, pre, 0.0)

    pix = output.entry_pixel
    vert = output.entry_vertex
    u = (pix % cfg.width).astype(float)
    v = (pix // cfg.width).astype(float)
    du = u - projected[0, vert]
    dv = v - projected[1, vert]
    weight = np.exp(-(du**2 + dv**2) / (2.0 * cfg.sigma**2))

    npix = cfg.height * cfg.width
    numer = np.bincount(pix, weights=weight * (g * output.mask)[vert], minlength=npix)
    denom = np.bincount(pix, weights=weight, minlength=npix)
    image = np.full(npix, float(cfg.background_value))
    filled = output.weight_sum.reshape(-1) > 0.0
    image[filled] = numer[filled] / denom[filled]
    return image.reshape(cfg.height, cfg.width)


def structure_signature(output: VisualizationOutput):
    """Canonical tuple describing the discrete render structure.

    Two forwards with equal signatures share visibility winners, clamp
    branches and pixel membership, hence the same smooth function.
    """
    return (
        output.visible.tobytes(),
        output.clamp_active.tobytes(),
        output.entry_pixel.tobytes(),
        output.entry_vertex.tobytes(),
    )
