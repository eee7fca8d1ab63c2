"""Pinhole camera math, rigid poses, depth unprojection and depth-map normals.

Conventions:
    - depth is z-depth in meters, 0 marks a missing measurement
    - pixel (u, v) is column u, row v; pixel centers sit at integer coordinates
    - a Pose maps camera coordinates to world coordinates
    - quaternions are stored (qx, qy, qz, qw)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Normals are dropped across depth jumps larger than this (meters).
NORMAL_DISCONTINUITY = 0.05


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1.0 / 1000.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside the raster")
        if not self.depth_scale > 0:
            raise GeometryError("depth_scale must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        """Camera-frame points (N, 3) to continuous pixel coords (N, 2)."""
        p = np.asarray(points_cam, dtype=np.float64)
        z = p[:, 2]
        return np.stack([p[:, 0] * self.fx / z + self.cx, p[:, 1] * self.fy / z + self.cy], axis=1)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height, "depth_scale": self.depth_scale,
        }


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (qx, qy, qz, qw) with qw >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s])
    q = q / np.linalg.norm(q)
    return -q if q[3] < 0 else q


@dataclass(frozen=True)
class Pose:
    """World-from-camera rigid transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if q.shape != (4,) or t.shape != (3,):
            raise GeometryError("pose needs a 4-vector quaternion and a 3-vector translation")
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise GeometryError("degenerate quaternion")
        object.__setattr__(self, "rotation", q / n)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> Pose:
        T = np.asarray(T, dtype=np.float64)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3].copy())

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> Pose:
        x, y, z, w = self.rotation
        q_inv = np.array([-x, -y, -z, w])
        return Pose(q_inv, -(quat_to_matrix(q_inv) @ self.translation))

    def compose(self, other: Pose) -> Pose:
        """self * other (apply other first)."""
        return Pose.from_matrix(self.matrix() @ other.matrix())

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.translation


@dataclass(frozen=True)
class DepthMap:
    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2:
            raise GeometryError("depth map must be 2-D")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise GeometryError("depth values must be finite and non-negative")
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.data > 0


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    pixels: np.ndarray | None = None  # (N, 2) int (u, v) source pixel, if any

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", p)
        if self.normals is not None:
            n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(n) != len(p):
                raise GeometryError("points and normals differ in count")
            if len(n) and np.max(np.abs(np.linalg.norm(n, axis=1) - 1.0)) > 1e-6:
                raise GeometryError("normals must have unit length")
            object.__setattr__(self, "normals", n)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            raise GeometryError("ray direction must be unit length")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d)

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


def _check_dims(depth: DepthMap, intr: CameraIntrinsics):
    if depth.width != intr.width or depth.height != intr.height:
        raise GeometryError(
            f"depth map is {depth.width}x{depth.height} but intrinsics say {intr.width}x{intr.height}"
        )


def unproject_raster(depth: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Per-pixel camera-frame positions (H, W, 3); invalid pixels keep z = 0."""
    h, w = depth.shape
    u = np.arange(w, dtype=np.float64)[None, :]
    v = np.arange(h, dtype=np.float64)[:, None]
    x = (u - intr.cx) * depth / intr.fx
    y = (v - intr.cy) * depth / intr.fy
    return np.stack([x, y, depth], axis=-1)


def unproject(depth: DepthMap, intr: CameraIntrinsics) -> PointCloud:
    _check_dims(depth, intr)
    xyz = unproject_raster(depth.data, intr)
    vv, uu = np.nonzero(depth.valid)
    return PointCloud(xyz[vv, uu], pixels=np.stack([uu, vv], axis=1))


def estimate_normals(depth: DepthMap, intr: CameraIntrinsics,
                     max_jump: float = NORMAL_DISCONTINUITY) -> PointCloud:
    """Normals from central differences of the unprojected raster, camera-facing.

    Pixels on the border, next to a missing neighbor, or across a depth jump
    larger than ``max_jump`` are dropped.
    """
    _check_dims(depth, intr)
    d = depth.data
    xyz = unproject_raster(d, intr)
    h, w = d.shape
    ok = np.zeros((h, w), dtype=bool)
    if h < 3 or w < 3:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 2), dtype=np.int64))

    c = d[1:-1, 1:-1]
    left, right = d[1:-1, :-2], d[1:-1, 2:]
    up, down = d[:-2, 1:-1], d[2:, 1:-1]
    inner = (c > 0) & (left > 0) & (right > 0) & (up > 0) & (down > 0)
    for nb in (left, right, up, down):
        inner &= np.abs(nb - c) <= max_jump
    ok[1:-1, 1:-1] = inner

    du = xyz[1:-1, 2:] - xyz[1:-1, :-2]
    dv = xyz[2:, 1:-1] - xyz[:-2, 1:-1]
    n = np.zeros((h, w, 3))
    n[1:-1, 1:-1] = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1)
    ok &= norm > 1e-12
    vv, uu = np.nonzero(ok)
    pts = xyz[vv, uu]
    nrm = n[vv, uu] / norm[vv, uu][:, None]
    # orient toward the camera: the viewing ray is +pts, so dot(n, pts) must be negative
    flip = np.einsum("ij,ij->i", nrm, pts) > 0
    nrm[flip] *= -1.0
    return PointCloud(pts, nrm, np.stack([uu, vv], axis=1))


def transform(pose: Pose, pc: PointCloud) -> PointCloud:
    R = pose.R
    pts = pc.points @ R.T + pose.translation
    nrm = None if pc.normals is None else pc.normals @ R.T
    if nrm is not None and len(nrm):
        nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    return PointCloud(pts, nrm, pc.pixels)


def pixel_directions(intr: CameraIntrinsics, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Camera-frame ray directions with unit z (not normalized), shape (N, 3)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)


def pixel_ray(intr: CameraIntrinsics, pose: Pose, u: float, v: float) -> Ray:
    if not (0 <= u <= intr.width - 1 and 0 <= v <= intr.height - 1):
        raise GeometryError(f"pixel ({u}, {v}) outside {intr.width}x{intr.height} raster")
    d = pose.R @ pixel_directions(intr, np.array([u]), np.array([v]))[0]
    return Ray(pose.translation.copy(), d / np.linalg.norm(d))
