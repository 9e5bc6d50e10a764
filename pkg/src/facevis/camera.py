"""Weak-perspective camera, full parameter state, and point projection.

The camera is an unconstrained 2 x 4 matrix whose rows are a scaled
rotation plus translations.  The full parameter vector of one face
instance concatenates the eight camera entries with the shape
coefficients, in the fixed order [m1..m8, identity, expression], which
every gradient layout and file format in the package follows.
"""

from dataclasses import dataclass

import numpy as np

from .model import ModelError, ShapeModel, ShapeParams, compose_shape

# positions of the scaled-rotation and translation entries inside the
# canonical parameter vector
ROTATION_INDICES = (0, 1, 2, 4, 5, 6)
TRANSLATION_INDICES = (3, 7)


@dataclass
class CameraMatrix:
    """The eight entries of the 2 x 4 weak-perspective projection matrix."""

    m: np.ndarray  # (8,)

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=float)
        if self.m.shape != (8,):
            raise ModelError("camera parameter vector must have 8 entries")

    @classmethod
    def identity(cls, scale: float = 1.0, tx: float = 0.0, ty: float = 0.0) -> "CameraMatrix":
        """Frontal camera with uniform scale and pixel translations."""
        return cls(np.array([scale, 0.0, 0.0, tx, 0.0, scale, 0.0, ty]))

    @classmethod
    def from_matrix(cls, mat) -> "CameraMatrix":
        mat = np.asarray(mat, dtype=float)
        if mat.shape != (2, 4):
            raise ModelError("camera matrix must be 2 x 4")
        return cls(mat.reshape(8).copy())

    @property
    def row1(self) -> np.ndarray:
        """Scaled-rotation row acting on x, entries m1..m3."""
        return self.m[0:3]

    @property
    def row2(self) -> np.ndarray:
        """Scaled-rotation row acting on y, entries m5..m7."""
        return self.m[4:7]

    @property
    def translation(self) -> np.ndarray:
        """(m4, m8): pixel translations of the two image axes."""
        return self.m[[3, 7]]

    def as_matrix(self) -> np.ndarray:
        return self.m.reshape(2, 4)

    def is_valid_weak_perspective(self, rel_tol: float = 1e-6) -> bool:
        """Whether the rotation rows have equal norms and are orthogonal.

        Diagnostic only; construction never enforces it because parameter
        updates are unconstrained.
        """
        if not np.all(np.isfinite(self.m)):
            return False
        n1 = np.linalg.norm(self.row1)
        n2 = np.linalg.norm(self.row2)
        if n1 == 0.0 or n2 == 0.0:
            return False
        if abs(n1 - n2) > rel_tol * max(n1, n2):
            return False
        return abs(float(self.row1 @ self.row2)) <= rel_tol * n1**2

    def copy(self) -> "CameraMatrix":
        return CameraMatrix(self.m.copy())


@dataclass
class ParamVector:
    """Full per-face state: camera matrix plus shape coefficients.

    Updates are additive and componentwise on the flattened vector.
    """

    camera: CameraMatrix
    shape: ShapeParams

    @classmethod
    def from_vector(cls, vec, n_id: int, n_exp: int) -> "ParamVector":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (8 + n_id + n_exp,):
            raise ModelError("parameter vector has the wrong length")
        return cls(CameraMatrix(vec[:8].copy()),
                   ShapeParams.from_full(vec[8:], n_id, n_exp))

    @property
    def dim(self) -> int:
        return 8 + self.shape.identity.size + self.shape.expression.size

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.camera.m, self.shape.full])

    def add(self, delta) -> "ParamVector":
        """Return the updated state after an additive step."""
        delta = np.asarray(delta, dtype=float)
        if delta.shape != (self.dim,):
            raise ModelError("parameter update has the wrong length")
        return ParamVector.from_vector(self.as_vector() + delta,
                                       self.shape.identity.size,
                                       self.shape.expression.size)

    def copy(self) -> "ParamVector":
        return ParamVector(self.camera.copy(), self.shape.copy())


@dataclass
class LandmarkSet:
    """2D landmark positions (2 x N, pixels) with per-landmark visibility."""

    points: np.ndarray
    visibility: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.visibility = np.asarray(self.visibility, dtype=bool)
        if self.points.ndim != 2 or self.points.shape[0] != 2:
            raise ModelError("landmark points must be a 2 x N array")
        if self.visibility.shape != (self.points.shape[1],):
            raise ModelError("visibility flags must match the landmark count")

    @property
    def count(self) -> int:
        return self.points.shape[1]


def project_points(vertices: np.ndarray, camera: CameraMatrix) -> np.ndarray:
    """Apply the weak-perspective camera to a 3 x n vertex matrix."""
    v = np.asarray(vertices, dtype=float)
    x = camera.row1 @ v + camera.m[3]
    y = camera.row2 @ v + camera.m[7]
    return np.stack([x, y])


def project_all(model: ShapeModel, params: ParamVector) -> np.ndarray:
    """Project every model vertex, returning the 2 x Q pixel coordinates."""
    return project_points(compose_shape(model, params.shape), params.camera)


def project_landmarks(model: ShapeModel, params: ParamVector) -> LandmarkSet:
    """Project the designated landmark vertices (positions only).

    Visibility flags are returned all-true; use :func:`landmark_visibility`
    for the frontability-based flags.
    """
    pts = project_all(model, params)[:, model.landmark_indices]
    return LandmarkSet(pts, np.ones(model.num_landmarks, dtype=bool))


def projection_jacobian(model: ShapeModel, params: ParamVector,
                        vertex_indices=None) -> np.ndarray:
    """Partial derivatives of projected coordinates w.r.t. all parameters.

    Returns an array of shape (2, n, dim) pairing each projected
    coordinate (axis 0 over x/y, axis 1 over the selected vertices) with
    its gradient over [m1..m8, identity, expression].  ``vertex_indices``
    restricts the rows to a vertex subset (e.g. the landmarks).
    """
    shape = compose_shape(model, params.shape)
    bases = model.all_bases()
    if vertex_indices is not None:
        idx = np.asarray(vertex_indices, dtype=np.int64)
        shape = shape[:, idx]
        bases = bases[:, :, idx]
    n = shape.shape[1]
    dim = model.num_params
    jac = np.zeros((2, n, dim))
    jac[0, :, 0:3] = shape.T
    jac[0, :, 3] = 1.0
    jac[1, :, 4:7] = shape.T
    jac[1, :, 7] = 1.0
    if bases.shape[0]:
        jac[0, :, 8:] = np.tensordot(params.camera.row1, bases, axes=(0, 1)).T
        jac[1, :, 8:] = np.tensordot(params.camera.row2, bases, axes=(0, 1)).T
    return jac


def landmark_visibility(model: ShapeModel, params: ParamVector) -> np.ndarray:
    """Visibility flags for the landmark vertices.

    A landmark is visible iff its frontability is strictly positive; no
    depth test is applied because landmarks are semantic vertices.
    """
    from .raster import frontability

    g = frontability(model, params.camera)
    return g[model.landmark_indices] > 0.0
