"""Linear 3D face shape model.

A face shape is a mean surface plus linear combinations of identity and
expression basis offsets.  This module owns the model container, shape
composition, mean-surface vertex normals, the per-vertex weighting masks,
a deterministic synthetic model generator (stand-in for proprietary basis
data), and the JSON model file format.
"""

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np


MODEL_FORMAT_VERSION = 1

_MODEL_FILE_FIELDS = (
    "version",
    "Q",
    "n_id",
    "n_exp",
    "mean_shape",
    "bases_id",
    "bases_exp",
    "basis_stddev_id",
    "basis_stddev_exp",
    "triangles",
    "landmark_indices",
    "nose_tip_index",
    "sigma_n",
)


class ModelError(ValueError):
    """A shape model violates a structural invariant."""


class ModelFormatError(ModelError):
    """A model file cannot be parsed or is missing required content."""


@dataclass
class ShapeModel:
    """Container for the linear face shape model.

    mean_shape, bases and normals use a 3 x Q column-per-vertex layout.
    ``mean_normals`` and ``mask`` are derived quantities; factories and
    :func:`load_model` compute them, they are never stored on disk.
    """

    mean_shape: np.ndarray          # (3, Q)
    bases_id: np.ndarray            # (n_id, 3, Q)
    bases_exp: np.ndarray           # (n_exp, 3, Q)
    basis_stddev_id: np.ndarray     # (n_id,)
    basis_stddev_exp: np.ndarray    # (n_exp,)
    triangles: np.ndarray           # (T, 3) int
    landmark_indices: np.ndarray    # (N,) int
    nose_tip_index: int
    sigma_n: float
    mean_normals: np.ndarray = field(default=None, repr=False)  # (3, Q)
    mask: np.ndarray = field(default=None, repr=False)          # (Q,)

    @property
    def num_vertices(self) -> int:
        return self.mean_shape.shape[1]

    @property
    def num_landmarks(self) -> int:
        return self.landmark_indices.shape[0]

    @property
    def n_id(self) -> int:
        return self.bases_id.shape[0]

    @property
    def n_exp(self) -> int:
        return self.bases_exp.shape[0]

    @property
    def num_params(self) -> int:
        """Dimension of the full parameter vector: 8 camera + shape entries."""
        return 8 + self.n_id + self.n_exp

    def basis_stddev(self) -> np.ndarray:
        """Concatenated per-basis coefficient standard deviations."""
        return np.concatenate([self.basis_stddev_id, self.basis_stddev_exp])

    def all_bases(self) -> np.ndarray:
        """Identity bases stacked above expression bases, shape (n_id+n_exp, 3, Q)."""
        return np.concatenate([self.bases_id, self.bases_exp], axis=0)

    def validate(self) -> None:
        """Raise :class:`ModelError` if any structural invariant is broken."""
        q = self.num_vertices
        if self.mean_shape.shape != (3, q):
            raise ModelError("mean_shape must be 3 x Q")
        if self.bases_id.shape[1:] != (3, q) or self.bases_exp.shape[1:] != (3, q):
            raise ModelError("basis shapes must match the mean shape")
        if self.basis_stddev_id.shape != (self.n_id,):
            raise ModelError("basis_stddev_id length must equal the identity basis count")
        if self.basis_stddev_exp.shape != (self.n_exp,):
            raise ModelError("basis_stddev_exp length must equal the expression basis count")
        if np.any(self.basis_stddev_id <= 0) or np.any(self.basis_stddev_exp <= 0):
            raise ModelError("basis standard deviations must be positive")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ModelError("triangles must be a T x 3 index array")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= q):
            raise ModelError("triangle vertex index out of range")
        if self.landmark_indices.min() < 0 or self.landmark_indices.max() >= q:
            raise ModelError("landmark vertex index out of range")
        if len(set(self.landmark_indices.tolist())) != self.num_landmarks:
            raise ModelError("landmark indices must be distinct")
        if not 0 <= self.nose_tip_index < q:
            raise ModelError("nose tip index out of range")
        if self.sigma_n <= 0:
            raise ModelError("sigma_n must be positive")
        if self.mean_normals is not None:
            norms = np.linalg.norm(self.mean_normals, axis=0)
            if np.max(np.abs(norms - 1.0)) > 1e-9:
                raise ModelError("mean normals must have unit length")
        if self.mask is not None:
            if abs(float(self.mask.mean())) > 1e-9 or abs(float(self.mask.std()) - 1.0) > 1e-9:
                raise ModelError("mask must be standardized to zero mean and unit std")


@dataclass
class ShapeParams:
    """Identity and expression coefficients for one face instance."""

    identity: np.ndarray
    expression: np.ndarray

    @classmethod
    def zeros(cls, model: ShapeModel) -> "ShapeParams":
        return cls(np.zeros(model.n_id), np.zeros(model.n_exp))

    @classmethod
    def from_full(cls, vec, n_id: int, n_exp: int) -> "ShapeParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (n_id + n_exp,):
            raise ModelError("shape parameter vector has the wrong length")
        return cls(vec[:n_id].copy(), vec[n_id:].copy())

    @property
    def full(self) -> np.ndarray:
        """Concatenated coefficient vector, identity entries first."""
        return np.concatenate([self.identity, self.expression])

    def copy(self) -> "ShapeParams":
        return ShapeParams(self.identity.copy(), self.expression.copy())


def compose_shape(model: ShapeModel, params: ShapeParams) -> np.ndarray:
    """Evaluate the linear shape model: mean plus weighted basis offsets.

    Returns the posed-neutral 3 x Q vertex matrix.
    """
    pid = np.asarray(params.identity, dtype=float)
    pexp = np.asarray(params.expression, dtype=float)
    if pid.shape != (model.n_id,) or pexp.shape != (model.n_exp,):
        raise ModelError(
            "parameter lengths (%d, %d) do not match basis counts (%d, %d)"
            % (pid.size, pexp.size, model.n_id, model.n_exp)
        )
    shape = model.mean_shape.copy()
    if model.n_id:
        shape += np.tensordot(pid, model.bases_id, axes=(0, 0))
    if model.n_exp:
        shape += np.tensordot(pexp, model.bases_exp, axes=(0, 0))
    return shape


def compute_vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted per-vertex normals of a triangle mesh.

    Each vertex normal is the normalized sum of unnormalized incident face
    normals (cross products, so faces count proportionally to their area).
    Raises :class:`ModelError` for degenerate triangles and for vertices
    with no incident triangle, naming the offending element.
    """
    v = np.asarray(vertices, dtype=float)
    tri = np.asarray(triangles, dtype=np.int64)
    q = v.shape[1]
    if tri.size == 0:
        raise ModelError("mesh has no triangles")
    p0 = v[:, tri[:, 0]]
    p1 = v[:, tri[:, 1]]
    p2 = v[:, tri[:, 2]]
    face = np.cross(p1 - p0, p2 - p0, axis=0)  # magnitude = 2 * area
    areas = np.linalg.norm(face, axis=0)
    extent = float(np.max(np.linalg.norm(v - v.mean(axis=1, keepdims=True), axis=0)))
    tiny = 1e-12 * max(extent, 1.0) ** 2
    bad = np.nonzero(areas <= tiny)[0]
    if bad.size:
        raise ModelError("degenerate (zero-area) triangle %d" % int(bad[0]))

    acc = np.zeros((q, 3))
    counts = np.zeros(q, dtype=np.int64)
    for k in range(3):
        np.add.at(acc, tri[:, k], face.T)
        np.add.at(counts, tri[:, k], 1)
    isolated = np.nonzero(counts == 0)[0]
    if isolated.size:
        raise ModelError("vertex %d has no incident triangle" % int(isolated[0]))
    lens = np.linalg.norm(acc, axis=1)
    zero = np.nonzero(lens <= tiny)[0]
    if zero.size:
        raise ModelError("vertex %d has a vanishing accumulated normal" % int(zero[0]))
    return (acc / lens[:, None]).T


def compute_mean_normals(model: ShapeModel) -> np.ndarray:
    """Vertex normals of the mean shape, 3 x Q with unit columns."""
    return compute_vertex_normals(model.mean_shape, model.triangles)


def _standardize(values: np.ndarray) -> np.ndarray:
    std = float(values.std())
    if std < 1e-12:
        raise ModelError("mask values have zero variance; cannot standardize")
    return (values - values.mean()) / std


def compute_mask(model: ShapeModel, sigma_n: float | None = None) -> np.ndarray:
    """Per-vertex center weighting: Gaussian falloff from the nose tip.

    Computed on the mean shape and standardized to zero mean and unit
    standard deviation, so central vertices carry positive weight and the
    face contour negative weight.
    """
    if sigma_n is None:
        sigma_n = model.sigma_n
    if sigma_n <= 0:
        raise ModelError("sigma_n must be positive")
    tip = model.mean_shape[:, model.nose_tip_index][:, None]
    d2 = np.sum((model.mean_shape - tip) ** 2, axis=0)
    return _standardize(np.exp(-d2 / (2.0 * sigma_n**2)))


def compute_mask2(model: ShapeModel, centers, sigma_n: float | None = None) -> np.ndarray:
    """Multi-center variant of :func:`compute_mask`.

    ``centers`` lists vertex indices (canonically five: both eyes, nose
    tip, both mouth corners).  Each vertex takes the maximum Gaussian
    falloff over all centers before standardization.
    """
    if sigma_n is None:
        sigma_n = model.sigma_n
    if sigma_n <= 0:
        raise ModelError("sigma_n must be positive")
    centers = np.asarray(centers, dtype=np.int64)
    if centers.size == 0:
        raise ModelError("at least one center vertex is required")
    if centers.min() < 0 or centers.max() >= model.num_vertices:
        raise ModelError("center vertex index out of range")
    pts = model.mean_shape[:, centers]               # (3, C)
    diff = model.mean_shape[:, :, None] - pts[:, None, :]
    d2 = np.sum(diff**2, axis=0)                     # (Q, C)
    raw = np.exp(-d2.min(axis=1) / (2.0 * sigma_n**2))
    return _standardize(raw)


def default_feature_centers(model: ShapeModel) -> np.ndarray:
    """Pick the five feature centers (eyes, nose tip, mouth corners).

    The model file stores no such list, so the centers are located
    geometrically on the mean shape: nearest vertices to canonical eye and
    mouth-corner positions expressed as fractions of the face extent.
    """
    s = model.mean_shape
    cx, cy = s[0].mean(), s[1].mean()
    hw = (s[0].max() - s[0].min()) / 2.0
    hh = (s[1].max() - s[1].min()) / 2.0
    targets = [
        (cx - 0.38 * hw, cy + 0.30 * hh),   # left eye
        (cx + 0.38 * hw, cy + 0.30 * hh),   # right eye
        (cx - 0.30 * hw, cy - 0.45 * hh),   # left mouth corner
        (cx + 0.30 * hw, cy - 0.45 * hh),   # right mouth corner
    ]
    picked = [int(model.nose_tip_index)]
    for tx, ty in targets:
        d2 = (s[0] - tx) ** 2 + (s[1] - ty) ** 2
        order = np.argsort(d2)
        idx = next(int(i) for i in order if int(i) not in picked)
        picked.append(idx)
    # eyes, nose, mouth corners in reading order
    return np.array([picked[1], picked[2], picked[0], picked[3], picked[4]], dtype=np.int64)


# ---------------------------------------------------------------------------
# Synthetic model generation
# ---------------------------------------------------------------------------

_FACE_HALF_WIDTH = 1.0
_FACE_HALF_HEIGHT = 1.3
_DOME_HEIGHT = 0.55
_NOSE_HEIGHT = 0.45
_NOSE_WIDTH = 0.22
_NOSE_Y_FRACTION = -0.12

# canonical landmark positions as fractions of the face half extents;
# the nose tip is handled separately and always included
_LANDMARK_TARGETS = (
    (-0.38, 0.30),   # left eye
    (0.38, 0.30),    # right eye
    (-0.40, 0.52),   # left brow
    (0.40, 0.52),    # right brow
    (-0.30, -0.45),  # left mouth corner
    (0.30, -0.45),   # right mouth corner
    (0.0, -0.48),    # mouth center
    (0.0, -0.85),    # chin
    (-0.75, -0.15),  # left cheek contour
    (0.75, -0.15),   # right cheek contour
    (-0.68, 0.45),   # left temple
    (0.68, 0.45),    # right temple
    (0.0, 0.72),     # forehead
)


def _build_disk_mesh(q_target: int):
    """Polar vertex grid over the unit disk with at least q_target points.

    Ring i holds 6*i points (even counts keep the grid mirror symmetric
    about the vertical axis), giving 1 + 3*R*(R+1) vertices for R rings.
    """
    rings = 1
    while 1 + 3 * rings * (rings + 1) < q_target:
        rings += 1
    xs = [0.0]
    ys = [0.0]
    ring_start = [0]
    for i in range(1, rings + 1):
        n = 6 * i
        ring_start.append(len(xs))
        rho = i / rings
        ang = 2.0 * np.pi * np.arange(n) / n
        xs.extend((rho * np.cos(ang)).tolist())
        ys.extend((rho * np.sin(ang)).tolist())
    xs = np.array(xs)
    ys = np.array(ys)

    triangles = []
    # center fan
    first = ring_start[1]
    n1 = 6
    for j in range(n1):
        triangles.append((0, first + j, first + (j + 1) % n1))
    # stitch consecutive rings by sweeping both angle sequences
    for i in range(2, rings + 1):
        a0, na = ring_start[i - 1], 6 * (i - 1)
        b0, nb = ring_start[i], 6 * i
        ia = ib = 0
        while ia < na or ib < nb:
            next_a = (ia + 1) / na if ia < na else np.inf
            next_b = (ib + 1) / nb if ib < nb else np.inf
            av = a0 + ia % na
            bv = b0 + ib % nb
            if next_a <= next_b:
                triangles.append((av, bv, a0 + (ia + 1) % na))
                ia += 1
            else:
                triangles.append((av, bv, b0 + (ib + 1) % nb))
                ib += 1
    tri = np.array(triangles, dtype=np.int64)

    # enforce counterclockwise winding in the plane so normals point up
    e1x = xs[tri[:, 1]] - xs[tri[:, 0]]
    e1y = ys[tri[:, 1]] - ys[tri[:, 0]]
    e2x = xs[tri[:, 2]] - xs[tri[:, 0]]
    e2y = ys[tri[:, 2]] - ys[tri[:, 0]]
    flipped = e1x * e2y - e1y * e2x < 0
    tri[flipped] = tri[flipped][:, [0, 2, 1]]
    return xs, ys, tri


def _smooth_field(rng: np.random.Generator, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sum of a few random low-frequency plane waves over the surface."""
    out = np.zeros_like(x)
    for _ in range(3):
        freq = rng.uniform(0.6, 2.2)
        theta = rng.uniform(0.0, 2.0 * np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        out += amp * np.sin(freq * (np.cos(theta) * x + np.sin(theta) * y) + phase)
    return out


def _random_basis(rng: np.random.Generator, x, y, rms_target: float) -> np.ndarray:
    basis = np.stack([_smooth_field(rng, x, y) for _ in range(3)])
    rms = float(np.sqrt(np.mean(basis**2)))
    return basis * (rms_target / rms)


def generate_synthetic_model(seed: int, q_target: int = 500, n_id: int = 8,
                             n_exp: int = 4) -> ShapeModel:
    """Deterministically generate a self-contained synthetic face model.

    The mean surface is a front-facing elliptical dome with a protruding
    nose, so depth ordering, frontability and the nose-centered mask are
    all meaningful.  Basis offsets are smooth random fields; the sampling
    standard deviation of each coefficient is stored for loss weighting
    and dataset synthesis.
    """
    if q_target < 50:
        raise ModelError("q_target must be at least 50")
    if n_id < 1 or n_exp < 1:
        raise ModelError("n_id and n_exp must be at least 1")
    rng = np.random.default_rng(seed)

    ux, uy, triangles = _build_disk_mesh(q_target)
    x = _FACE_HALF_WIDTH * ux
    y = _FACE_HALF_HEIGHT * uy
    rho2 = ux**2 + uy**2
    z = _DOME_HEIGHT * (1.0 - rho2)

    # nose bump centered exactly on a grid vertex near the face midline
    target = np.array([0.0, _NOSE_Y_FRACTION * _FACE_HALF_HEIGHT])
    nose_tip = int(np.argmin((x - target[0]) ** 2 + (y - target[1]) ** 2))
    nx, ny = x[nose_tip], y[nose_tip]
    z = z + _NOSE_HEIGHT * np.exp(-((x - nx) ** 2 + (y - ny) ** 2) / (2.0 * _NOSE_WIDTH**2))

    mean_shape = np.stack([x, y, z])

    landmarks = [nose_tip]
    for fx, fy in _LANDMARK_TARGETS:
        tx = fx * _FACE_HALF_WIDTH
        ty = fy * _FACE_HALF_HEIGHT
        order = np.argsort((x - tx) ** 2 + (y - ty) ** 2)
        landmarks.append(next(int(i) for i in order if int(i) not in landmarks))

    radius = float(np.max(np.linalg.norm(
        mean_shape - mean_shape.mean(axis=1, keepdims=True), axis=0)))
    bases_id = np.stack([_random_basis(rng, x, y, 0.045 * radius) for _ in range(n_id)])
    bases_exp = np.stack([_random_basis(rng, x, y, 0.040 * radius) for _ in range(n_exp)])
    stddev_id = 1.0 * 0.88 ** np.arange(n_id)
    stddev_exp = 0.8 * 0.88 ** np.arange(n_exp)

    model = ShapeModel(
        mean_shape=mean_shape,
        bases_id=bases_id,
        bases_exp=bases_exp,
        basis_stddev_id=stddev_id,
        basis_stddev_exp=stddev_exp,
        triangles=triangles,
        landmark_indices=np.array(landmarks, dtype=np.int64),
        nose_tip_index=nose_tip,
        sigma_n=0.3 * radius,
    )
    model.mean_normals = compute_mean_normals(model)
    model.mask = compute_mask(model)
    model.validate()
    return model


# ---------------------------------------------------------------------------
# Model file format
# ---------------------------------------------------------------------------


def save_model(model: ShapeModel, path) -> None:
    """Write the model to its JSON file format.

    Derived fields (normals, mask) are recomputed on load and not stored.
    Serialization is deterministic, so equal models give equal bytes.
    """
    obj = {
        "version": MODEL_FORMAT_VERSION,
        "Q": model.num_vertices,
        "n_id": model.n_id,
        "n_exp": model.n_exp,
        "mean_shape": model.mean_shape.tolist(),
        "bases_id": [b.tolist() for b in model.bases_id],
        "bases_exp": [b.tolist() for b in model.bases_exp],
        "basis_stddev_id": model.basis_stddev_id.tolist(),
        "basis_stddev_exp": model.basis_stddev_exp.tolist(),
        "triangles": model.triangles.tolist(),
        "landmark_indices": model.landmark_indices.tolist(),
        "nose_tip_index": int(model.nose_tip_index),
        "sigma_n": float(model.sigma_n),
    }
    with open(path, "w") as fh:
        json.dump(obj, fh, separators=(",", ":"))


def load_model(path) -> ShapeModel:
    """Load, validate and finalize a model from its JSON file."""
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError("unparseable model file %s: %s" % (path, exc)) from exc
    for key in _MODEL_FILE_FIELDS:
        if key not in obj:
            raise ModelFormatError("model file missing section '%s'" % key)
    if obj["version"] != MODEL_FORMAT_VERSION:
        raise ModelFormatError(
            "unsupported model format version %r (expected %d)"
            % (obj["version"], MODEL_FORMAT_VERSION)
        )
    try:
        model = ShapeModel(
            mean_shape=np.asarray(obj["mean_shape"], dtype=float),
            bases_id=np.asarray(obj["bases_id"], dtype=float),
            bases_exp=np.asarray(obj["bases_exp"], dtype=float),
            basis_stddev_id=np.asarray(obj["basis_stddev_id"], dtype=float),
            basis_stddev_exp=np.asarray(obj["basis_stddev_exp"], dtype=float),
            triangles=np.asarray(obj["triangles"], dtype=np.int64),
            landmark_indices=np.asarray(obj["landmark_indices"], dtype=np.int64),
            nose_tip_index=int(obj["nose_tip_index"]),
            sigma_n=float(obj["sigma_n"]),
        )
    except (TypeError, ValueError) as exc:
        raise ModelFormatError("malformed model file %s: %s" % (path, exc)) from exc
    if model.mean_shape.shape != (3, int(obj["Q"])):
        raise ModelFormatError("mean_shape does not match the declared vertex count")
    if model.n_id != int(obj["n_id"]) or model.n_exp != int(obj["n_exp"]):
        raise ModelFormatError("basis counts do not match the declared n_id/n_exp")
    model.validate()
    model.mean_normals = compute_mean_normals(model)
    model.mask = compute_mask(model)
    model.validate()
    return model
