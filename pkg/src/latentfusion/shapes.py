"""Analytic signed-distance primitives and a sphere-tracing depth renderer.

Every primitive returns an exact Euclidean SDF (positive outside / in free
space). ``Union`` takes the pointwise minimum, which stays exact outside the
solids.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, DepthMap, Pose, pixel_directions


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _rotation(axis_z) -> np.ndarray:
    """Some rotation whose third column is ``axis_z``."""
    z = _unit(axis_z)
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = _unit(np.cross(helper, z))
    return np.stack([x, np.cross(z, x), z], axis=1)


class Shape:
    def sdf(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def normal(self, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        g = np.empty_like(x)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            g[:, k] = self.sdf(x + e) - self.sdf(x - e)
        return g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-30)

    def project(self, x: np.ndarray, iters: int = 4) -> np.ndarray:
        """Move points onto the zero level set along the SDF gradient."""
        x = np.array(x, dtype=np.float64)
        for _ in range(iters):
            x = x - self.sdf(x)[:, None] * self.normal(x)
        return x

    def sample_surface(self, n: int, rng: np.random.Generator, extent: float = 1.0,
                       center=(0.0, 0.0, 0.0)) -> np.ndarray:
        x = np.asarray(center) + rng.uniform(-extent, extent, size=(n, 3))
        return self.project(x, iters=8)


@dataclass
class Plane(Shape):
    point: np.ndarray = field(default_factory=lambda: np.zeros(3))
    normal_dir: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64)
        self.normal_dir = _unit(self.normal_dir)

    def sdf(self, x):
        return (np.asarray(x) - self.point) @ self.normal_dir


@dataclass
class Sphere(Shape):
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 0.5

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)

    def sdf(self, x):
        return np.linalg.norm(np.asarray(x) - self.center, axis=-1) - self.radius


@dataclass
class Box(Shape):
    """Oriented box; ``rotation`` columns are the box axes in world frame.

    ``hollow=True`` flips the sign, modelling the inside of a room whose
    free space is the box interior.
    """

    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    half_size: np.ndarray = field(default_factory=lambda: np.full(3, 0.25))
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    hollow: bool = False

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.half_size = np.asarray(self.half_size, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)

    def sdf(self, x):
        local = (np.asarray(x) - self.center) @ self.rotation
        q = np.abs(local) - self.half_size
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        d = outside + inside
        return -d if self.hollow else d


@dataclass
class Cylinder(Shape):
    """Capped cylinder around ``axis`` through ``center``."""

    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    radius: float = 0.2
    half_height: float = 0.3

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.axis = _unit(self.axis)

    def sdf(self, x):
        rel = np.asarray(x) - self.center
        h = rel @ self.axis
        r = np.linalg.norm(rel - np.multiply.outer(h, self.axis), axis=-1)
        q = np.stack([r - self.radius, np.abs(h) - self.half_height], axis=-1)
        return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(np.max(q, axis=-1), 0.0)


@dataclass
class Wedge(Shape):
    """Dihedral edge: the intersection of two half-spaces sharing a line through ``point``.

    ``n1``/``n2`` are outward normals; the solid is {n1.(x-p) <= 0, n2.(x-p) <= 0}.
    """

    point: np.ndarray = field(default_factory=lambda: np.zeros(3))
    n1: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    n2: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64)
        self.n1 = _unit(self.n1)
        self.n2 = _unit(self.n2)
        self.edge = _unit(np.cross(self.n1, self.n2))

    def sdf(self, x):
        rel = np.asarray(x, dtype=np.float64) - self.point
        d1 = rel @ self.n1
        d2 = rel @ self.n2
        along = rel @ self.edge
        to_edge = np.linalg.norm(rel - np.multiply.outer(along, self.edge), axis=-1)
        # distance to face k is |dk| when the foot point stays inside the other half-space
        foot1_ok = (rel - np.multiply.outer(d1, self.n1)) @ self.n2 <= 0
        foot2_ok = (rel - np.multiply.outer(d2, self.n2)) @ self.n1 <= 0
        f1 = np.where(foot1_ok, np.abs(d1), to_edge)
        f2 = np.where(foot2_ok, np.abs(d2), to_edge)
        outside = np.minimum(np.where(d1 > 0, f1, np.inf), np.where(d2 > 0, f2, np.inf))
        return np.where((d1 <= 0) & (d2 <= 0), np.maximum(d1, d2), outside)


@dataclass
class Union(Shape):
    parts: list

    def sdf(self, x):
        return np.min(np.stack([p.sdf(x) for p in self.parts]), axis=0)


def shape_from_dict(d: dict) -> Shape:
    kind = d["type"]
    if kind == "plane":
        return Plane(d.get("point", [0, 0, 0]), d.get("normal", [0, 0, 1]))
    if kind == "sphere":
        return Sphere(d.get("center", [0, 0, 0]), float(d["radius"]))
    if kind == "box":
        rot = np.eye(3) if "axis" not in d else _rotation(d["axis"])
        return Box(d.get("center", [0, 0, 0]), d["half_size"], rot, bool(d.get("hollow", False)))
    if kind == "cylinder":
        return Cylinder(d.get("center", [0, 0, 0]), d.get("axis", [0, 0, 1]),
                        float(d["radius"]), float(d["half_height"]))
    if kind == "wedge":
        return Wedge(d.get("point", [0, 0, 0]), d["n1"], d["n2"])
    raise ValueError(f"unknown primitive type {kind!r}")


def sphere_trace(shape: Shape, origins: np.ndarray, dirs: np.ndarray, t_max: float = 20.0,
                 tol: float = 1e-7, max_steps: int = 400) -> np.ndarray:
    """Ray parameter of the first hit, NaN for misses. ``dirs`` must be unit length."""
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    n = len(dirs)
    t = np.zeros(n)
    active = np.arange(n)
    hit = np.zeros(n, dtype=bool)
    for _ in range(max_steps):
        if active.size == 0:
            break
        d = shape.sdf(origins[active] + t[active, None] * dirs[active])
        done = np.abs(d) < tol
        hit[active[done]] = True
        t[active] += np.where(done, 0.0, d)
        keep = ~done & (t[active] < t_max) & (t[active] >= 0)
        active = active[keep]
    t[~hit] = np.nan
    return t


def render_depth(shape: Shape, intr: CameraIntrinsics, pose: Pose, t_max: float = 20.0) -> DepthMap:
    """Noise-free z-depth image of ``shape`` seen from ``pose``; misses are 0."""
    vv, uu = np.mgrid[0:intr.height, 0:intr.width]
    d_cam = pixel_directions(intr, uu.ravel(), vv.ravel())
    scale = np.linalg.norm(d_cam, axis=1)
    d_world = (d_cam / scale[:, None]) @ pose.R.T
    t = sphere_trace(shape, pose.translation, d_world, t_max=t_max)
    z = t / scale
    z[~np.isfinite(z)] = 0.0
    return DepthMap(z.reshape(intr.height, intr.width))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose at ``eye`` looking at ``target``: +z forward, +y down in image."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = _unit(np.asarray(target, dtype=np.float64) - eye)
    up = np.asarray(up, dtype=np.float64)
    if abs(fwd @ _unit(up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    right = _unit(np.cross(fwd, up))
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=1)
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = eye
    return Pose.from_matrix(T)
