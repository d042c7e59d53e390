"""Core geometric types and numerics shared by the reconstruction pipeline.

Conventions: distances are meters, camera frames are x-right / y-down /
z-forward, poses map camera coordinates into model coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "Pose",
    "CameraIntrinsics",
    "ObjectCloud",
    "NeighborIndex",
    "EstimationError",
    "depth_to_cloud",
    "estimate_normals",
    "rigid_from_correspondences",
    "transform_cloud",
    "rotation_about_axis",
    "rotvec_to_matrix",
    "matrix_to_rotvec",
    "quaternion_to_matrix",
    "matrix_to_quaternion",
    "rotation_angle",
]

_ORTHO_TOL = 1e-9


class EstimationError(ValueError):
    """Raised when a geometric estimate is underdetermined or degenerate."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# rotation helpers
# ---------------------------------------------------------------------------

def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rotation matrix for `angle` radians about `axis` (need not be unit)."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise ValueError("rotation axis must be nonzero")
    return rotvec_to_matrix(axis / n * angle)


def rotvec_to_matrix(w) -> np.ndarray:
    """Exponential map so(3) -> SO(3) (Rodrigues)."""
    w = np.asarray(w, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(w))
    if theta < 1e-14:
        return np.eye(3)
    k = w / theta
    K = np.array([[0.0, -k[2], k[1]],
                  [k[2], 0.0, -k[0]],
                  [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def matrix_to_rotvec(R: np.ndarray) -> np.ndarray:
    """Logarithm map SO(3) -> so(3)."""
    R = np.asarray(R, dtype=np.float64)
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos_t))
    if theta < 1e-12:
        return np.zeros(3)
    if theta > np.pi - 1e-6:
        # near pi the off-diagonal formula is ill-conditioned; use the
        # symmetric part instead
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(A), 0.0, None))
        # fix signs from the off-diagonal entries
        k = int(np.argmax(axis))
        if axis[k] > 0:
            for i in range(3):
                if i != k and A[k, i] < 0:
                    axis[i] = -axis[i]
        n = np.linalg.norm(axis)
        if n == 0.0:
            return np.zeros(3)
        return axis / n * theta
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return v / (2.0 * np.sin(theta)) * theta


def quaternion_to_matrix(q) -> np.ndarray:
    """Unit quaternion (x, y, z, w) to rotation matrix."""
    x, y, z, w = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.sqrt(x * x + y * y + z * z + w * w)
    if n == 0.0:
        raise ValueError("zero quaternion")
    x, y, z, w = x / n, y / n, z / n, w / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (x, y, z, w), w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    q = np.array([x, y, z, w])
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def rotation_angle(Ra: np.ndarray, Rb: np.ndarray | None = None) -> float:
    """Angle in radians of Ra (or of the relative rotation Ra -> Rb)."""
    R = np.asarray(Ra, dtype=np.float64)
    if Rb is not None:
        R = R.T @ np.asarray(Rb, dtype=np.float64)
    return float(np.arccos(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)))


# ---------------------------------------------------------------------------
# Pose
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform in SE(3): p -> rotation @ p + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(R @ R.T - np.eye(3)).max()
        if err > _ORTHO_TOL:
            raise ValueError(f"rotation not orthonormal (max deviation {err:.3e})")
        if np.linalg.det(R) < 0:
            raise ValueError("rotation has negative determinant (reflection)")
        object.__setattr__(self, "rotation", _readonly(R))
        object.__setattr__(self, "translation", _readonly(t))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_rotvec(w, t=(0.0, 0.0, 0.0)) -> "Pose":
        return Pose(rotvec_to_matrix(w), np.asarray(t, dtype=np.float64))

    @staticmethod
    def from_quaternion(q, t=(0.0, 0.0, 0.0)) -> "Pose":
        return Pose(quaternion_to_matrix(q), np.asarray(t, dtype=np.float64))

    def quaternion(self) -> np.ndarray:
        return matrix_to_quaternion(self.rotation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose") -> "Pose":
        """self o other: apply `other` first, then `self`."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def rotate(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def translation_distance(self, other: "Pose") -> float:
        return float(np.linalg.norm(self.translation - other.translation))

    def rotation_angle_to(self, other: "Pose") -> float:
        return rotation_angle(self.rotation, other.rotation)


# ---------------------------------------------------------------------------
# CameraIntrinsics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera intrinsics with a depth unit multiplier."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 0.001

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")
        if self.depth_scale <= 0:
            raise ValueError("depth_scale must be positive")

    def project(self, points) -> np.ndarray:
        """Camera-frame points to pixel coordinates (u, v). No validity check."""
        p = np.asarray(points, dtype=np.float64)
        z = p[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = p[..., 0] / z * self.fx + self.cx
            v = p[..., 1] / z * self.fy + self.cy
        return np.stack([u, v], axis=-1)

    def backproject(self, pixels, z) -> np.ndarray:
        px = np.asarray(pixels, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        x = (px[..., 0] - self.cx) * z / self.fx
        y = (px[..., 1] - self.cy) * z / self.fy
        return np.stack([x, y, z], axis=-1)


# ---------------------------------------------------------------------------
# ObjectCloud
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ObjectCloud:
    """Point set with per-point normal, color, edge flag and weight.

    Organized clouds (width/height set) keep one slot per pixel in row-major
    order; invalid-depth slots hold NaN points so pixel index sets stay valid.
    Normals are NaN where not yet computed or degenerate.
    """

    points: np.ndarray
    normals: np.ndarray | None
    colors: np.ndarray
    edge_flags: np.ndarray
    weights: np.ndarray
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        n = len(pts)
        normals = self.normals
        if normals is not None:
            normals = np.array(normals, dtype=np.float64).reshape(-1, 3)
            if len(normals) != n:
                raise ValueError("normals length mismatch")
            finite = np.isfinite(normals).all(axis=1)
            if finite.any():
                norms = np.linalg.norm(normals[finite], axis=1)
                if np.abs(norms - 1.0).max() > 1e-6:
                    raise ValueError("stored normals must have unit norm")
            object.__setattr__(self, "normals", _readonly(normals))
        colors = np.array(self.colors, dtype=np.uint8).reshape(-1, 3)
        flags = np.array(self.edge_flags, dtype=bool).reshape(-1)
        weights = np.array(self.weights, dtype=np.float64).reshape(-1)
        if not (len(colors) == len(flags) == len(weights) == n):
            raise ValueError("attribute lists must share one length")
        if len(weights) and (np.nanmin(weights) < 0.0 or np.nanmax(weights) > 1.0
                             or not np.isfinite(weights).all()):
            raise ValueError("weights must lie in [0, 1]")
        if (self.width is None) != (self.height is None):
            raise ValueError("width and height must be set together")
        if self.width is not None and self.width * self.height != n:
            raise ValueError("organized dimensions do not match point count")
        object.__setattr__(self, "points", _readonly(pts))
        object.__setattr__(self, "colors", _readonly(colors))
        object.__setattr__(self, "edge_flags", _readonly(flags))
        object.__setattr__(self, "weights", _readonly(weights))

    @staticmethod
    def from_points(points, normals=None, colors=None, edge_flags=None,
                    weights=None, width=None, height=None) -> "ObjectCloud":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = len(pts)
        if colors is None:
            colors = np.zeros((n, 3), dtype=np.uint8)
        if edge_flags is None:
            edge_flags = np.zeros(n, dtype=bool)
        if weights is None:
            weights = np.ones(n, dtype=np.float64)
        return ObjectCloud(pts, normals, colors, edge_flags, weights,
                           width=width, height=height)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def is_organized(self) -> bool:
        return self.width is not None

    @property
    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.points).all(axis=1)

    @property
    def valid_indices(self) -> np.ndarray:
        return np.flatnonzero(self.valid_mask)

    def has_normals(self) -> bool:
        return self.normals is not None

    def select(self, indices) -> "ObjectCloud":
        """Unorganized sub-cloud at the given slot indices."""
        idx = np.asarray(indices, dtype=np.intp)
        return ObjectCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            self.colors[idx],
            self.edge_flags[idx],
            self.weights[idx],
        )

    def with_normals(self, normals) -> "ObjectCloud":
        return replace(self, normals=normals)

    def with_weights(self, weights) -> "ObjectCloud":
        return replace(self, weights=weights)

    def with_edge_flags(self, edge_flags) -> "ObjectCloud":
        return replace(self, edge_flags=edge_flags)


# ---------------------------------------------------------------------------
# NeighborIndex
# ---------------------------------------------------------------------------

class NeighborIndex:
    """Exact nearest-neighbor index over a 3D point set.

    Non-finite rows are skipped at build time; query results are reported as
    indices into the original array.
    """

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        finite = np.isfinite(pts).all(axis=1)
        self._ids = np.flatnonzero(finite)
        if len(self._ids) == 0:
            raise ValueError("cannot index an empty point set")
        self._pts = pts[finite]
        self._tree = cKDTree(self._pts)

    def __len__(self) -> int:
        return len(self._pts)

    @property
    def points(self) -> np.ndarray:
        return self._pts

    def nearest(self, query):
        """Distance and original index of the closest indexed point."""
        d, i = self._tree.query(np.asarray(query, dtype=np.float64), k=1)
        return float(d), int(self._ids[i])

    def query(self, queries, k: int = 1):
        """Batched k-NN. Returns (dists (M, k), original indices (M, k))."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        d, i = self._tree.query(q, k=k)
        d = np.atleast_2d(d.reshape(len(q), -1))
        i = np.atleast_2d(i.reshape(len(q), -1))
        return d, self._ids[i]

    def query_radius(self, queries, radius: float):
        """Original indices of points within `radius` of each query."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        hits = self._tree.query_ball_point(q, r=radius)
        return [self._ids[np.asarray(h, dtype=np.intp)] for h in hits]


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def depth_to_cloud(frame, intrinsics: CameraIntrinsics) -> ObjectCloud:
    """Back-project an organized RGB-D frame into an organized cloud.

    One slot per pixel in row-major order; pixels with invalid depth (zero or
    non-finite) keep their slot holding NaN so index sets remain stable.
    `frame` needs `depth` (H, W) in units of `depth_scale` and, optionally,
    `color` (H, W, 3).
    """
    depth = np.asarray(frame.depth)
    h, w = depth.shape
    if (w, h) != (intrinsics.width, intrinsics.height):
        raise ValueError(
            f"frame size {w}x{h} does not match intrinsics "
            f"{intrinsics.width}x{intrinsics.height}")
    z = depth.astype(np.float64) * intrinsics.depth_scale
    valid = np.isfinite(z) & (z > 0)
    z = np.where(valid, z, np.nan)
    u = np.arange(w, dtype=np.float64)[None, :]
    v = np.arange(h, dtype=np.float64)[:, None]
    x = (u - intrinsics.cx) * z / intrinsics.fx
    y = (v - intrinsics.cy) * z / intrinsics.fy
    pts = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    color = getattr(frame, "color", None)
    colors = None if color is None else np.asarray(color, dtype=np.uint8).reshape(-1, 3)
    return ObjectCloud.from_points(pts, colors=colors, width=w, height=h)


def estimate_normals(cloud: ObjectCloud, k: int = 15, indices=None) -> ObjectCloud:
    """Estimate per-point normals from k-neighborhood covariance.

    The normal is the eigenvector of the smallest covariance eigenvalue,
    oriented toward the sensor origin (dot(n, -p) >= 0). Neighborhoods of
    rank < 2 yield NaN normals. With `indices` given, only those slots are
    computed (the rest stay NaN / keep previous values).
    """
    if k < 3:
        raise ValueError("k must be at least 3")
    valid = cloud.valid_mask
    n_valid = int(valid.sum())
    if n_valid < k:
        raise ValueError(f"cloud has {n_valid} valid points, need at least k={k}")
    normals = (np.full((len(cloud), 3), np.nan) if cloud.normals is None
               else np.array(cloud.normals))

    if indices is None:
        targets = np.flatnonzero(valid)
    else:
        targets = np.asarray(indices, dtype=np.intp)
        targets = targets[valid[targets]]
    if len(targets) == 0:
        return cloud.with_normals(normals)

    index = NeighborIndex(cloud.points)
    _, nbr = index.query(cloud.points[targets], k=k)
    nbrs = cloud.points[nbr]                             # (M, k, 3)
    mean = nbrs.mean(axis=1, keepdims=True)
    centered = nbrs - mean
    cov = np.einsum("mki,mkj->mij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)                   # ascending eigenvalues
    normal = evecs[:, :, 0]
    # rank < 2: the two smallest eigenvalues both vanish (collinear points)
    degenerate = evals[:, 1] <= np.maximum(evals[:, 2] * 1e-7, 0.0)
    # orient toward the sensor at the origin
    flip = np.einsum("mi,mi->m", normal, cloud.points[targets]) > 0
    normal[flip] = -normal[flip]
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    normal[degenerate] = np.nan
    normals[targets] = normal
    return cloud.with_normals(normals)


def rigid_from_correspondences(src, dst, weights=None) -> Pose:
    """Weighted least-squares rigid transform taking src[i] onto dst[i].

    Closed-form weighted Procrustes via SVD; a reflection in the solution is
    corrected by flipping the smallest singular direction.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise EstimationError("src and dst must have equal shapes")
    n = len(src)
    if n < 3:
        raise EstimationError(f"need at least 3 correspondences, got {n}")
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if len(w) != n or (w < 0).any() or w.sum() <= 0:
            raise EstimationError("weights must be nonnegative with positive sum")
    w = w / w.sum()
    cs = w @ src
    cd = w @ dst
    H = (src - cs).T @ ((dst - cd) * w[:, None])
    U, S, Vt = np.linalg.svd(H)
    if S[1] <= max(S[0] * 1e-9, 1e-15):
        raise EstimationError("correspondences are collinear")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return Pose(R, cd - R @ cs)


def transform_cloud(cloud: ObjectCloud, pose: Pose) -> ObjectCloud:
    """Apply a rigid transform: points moved, normals rotated, rest kept."""
    pts = pose.apply(cloud.points)
    normals = None if cloud.normals is None else pose.rotate(cloud.normals)
    return ObjectCloud(pts, normals, cloud.colors, cloud.edge_flags,
                       cloud.weights, width=cloud.width, height=cloud.height)
