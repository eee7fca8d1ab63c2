"""Synthetic RGB-D-style scenes: analytic primitives, camera trajectories, sensor noise."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .fusion import Frame
from .geometry import CameraIntrinsics, DepthMap, Pose
from .mesh import TriangleMesh, marching_cubes
from .shapes import Union, look_at, render_depth, shape_from_dict

log = logging.getLogger(__name__)


@dataclass
class NoiseModel:
    sigma0: float = 0.0  # meters
    sigma_quad: float = 0.0  # 1/meters; sigma(d) = sigma0 + sigma_quad * d^2
    outlier_rate: float = 0.0
    quantization: float = 0.0  # meters, 0 disables
    seed: int = 0

    def __post_init__(self):
        if min(self.sigma0, self.sigma_quad, self.outlier_rate, self.quantization) < 0:
            raise ValueError("noise parameters must be non-negative")
        if self.outlier_rate > 1:
            raise ValueError("outlier_rate must be <= 1")

    @classmethod
    def default(cls, seed: int = 0) -> NoiseModel:
        return cls(sigma0=0.0012, sigma_quad=0.0019, outlier_rate=0.01, quantization=0.001, seed=seed)

    @classmethod
    def parse(cls, text: str) -> NoiseModel:
        """``none``, ``default``, a JSON file path, or ``key=value,...``."""
        if text in ("none", "zero", ""):
            return cls()
        if text == "default":
            return cls.default()
        p = Path(text)
        if p.suffix == ".json" and p.exists():
            return cls(**json.loads(p.read_text()))
        kv = dict(item.split("=", 1) for item in text.split(","))
        fields = {k: (int(v) if k == "seed" else float(v)) for k, v in kv.items()}
        return cls(**fields)

    def apply(self, depth: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        d = depth.copy()
        valid = d > 0
        if self.sigma0 > 0 or self.sigma_quad > 0:
            sigma = self.sigma0 + self.sigma_quad * d[valid] ** 2
            d[valid] += rng.normal(size=int(valid.sum())) * sigma
        if self.outlier_rate > 0 and np.any(valid):
            hit = valid & (rng.random(d.shape) < self.outlier_rate)
            lo, hi = NEAR_OUTLIER, float(depth[valid].max())
            d[hit] = rng.uniform(lo, hi, size=int(hit.sum()))
        if self.quantization > 0:
            d[valid] = np.round(d[valid] / self.quantization) * self.quantization
        d[valid & (d <= 0)] = 0.0
        return d


NEAR_OUTLIER = 0.2


@dataclass
class SyntheticSceneSpec:
    primitives: list
    trajectory: dict
    frame_count: int
    image_size: tuple = (320, 240)
    intrinsics: dict | None = None
    name: str = "scene"
    bounds: list | None = None  # region for the ground-truth mesh

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("a scene needs at least one primitive")
        if self.frame_count <= 0:
            raise ValueError("frame_count must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticSceneSpec:
        d = dict(d)
        d["image_size"] = tuple(d.get("image_size", (320, 240)))
        return cls(**d)

    @classmethod
    def load(cls, path) -> SyntheticSceneSpec:
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def builtin(cls, name: str) -> SyntheticSceneSpec:
        text = resources.files("latentfusion").joinpath(f"scenes/{name}.json").read_text()
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return asdict(self)

    def shape(self):
        return Union([shape_from_dict(p) for p in self.primitives])

    def camera(self) -> CameraIntrinsics:
        w, h = self.image_size
        if self.intrinsics:
            i = self.intrinsics
            return CameraIntrinsics(i["fx"], i["fy"], i["cx"], i["cy"], w, h, i.get("depth_scale", 0.001))
        f = 0.625 * w
        return CameraIntrinsics(f, f, (w - 1) / 2, (h - 1) / 2, w, h)

    def poses(self) -> list[Pose]:
        t = self.trajectory
        if t["type"] == "orbit":
            center = np.asarray(t.get("center", [0, 0, 0]), dtype=np.float64)
            target = np.asarray(t.get("target", center), dtype=np.float64)
            radius = float(t["radius"])
            # eye height and target height oscillate as cos(frequency * angle)
            bob = float(t.get("height_amplitude", 0.0))
            bob_f = float(t.get("height_frequency", 0.0))
            tilt = float(t.get("target_amplitude", 0.0))
            tilt_f = float(t.get("target_frequency", 0.0))
            turns = float(t.get("turns", 1.0))
            out = []
            for k in range(self.frame_count):
                th = 2 * np.pi * turns * k / self.frame_count
                eye = center + np.array([radius * np.cos(th), radius * np.sin(th), bob * np.cos(bob_f * th)])
                tgt = target + np.array([0.0, 0.0, tilt * np.cos(tilt_f * th)])
                out.append(look_at(eye, tgt))
            return out
        if t["type"] == "waypoints":
            return [look_at(w["eye"], w["target"]) for w in t["waypoints"]][: self.frame_count]
        raise ValueError(f"unknown trajectory type {t['type']!r}")


@dataclass
class SyntheticScene:
    spec: SyntheticSceneSpec
    intrinsics: CameraIntrinsics
    frames: list = field(default_factory=list)
    clean_depths: list = field(default_factory=list)
    gt_mesh: TriangleMesh | None = None

    @property
    def trajectory(self) -> list[Pose]:
        return [f.pose for f in self.frames]


def ground_truth_mesh(spec: SyntheticSceneSpec, step: float = 0.01) -> TriangleMesh:
    shape = spec.shape()
    lo, hi = np.asarray(spec.bounds[0], float), np.asarray(spec.bounds[1], float)
    return marching_cubes(shape.sdf, (lo, hi), step,
                          block_filter=_near_surface_filter(shape, step))


def _near_surface_filter(shape, step):
    def keep(lo, hi):
        c = 0.5 * (np.asarray(lo) + np.asarray(hi))
        half = 0.5 * np.linalg.norm(np.asarray(hi) - np.asarray(lo)) + step
        return abs(float(shape.sdf(c[None])[0])) <= half
    return keep


def synth_scene(spec: SyntheticSceneSpec, noise: NoiseModel, gt_step: float = 0.01,
                with_mesh: bool = True) -> SyntheticScene:
    """Render every frame (exact depth, then noise) and build the ground-truth mesh."""
    shape = spec.shape()
    intr = spec.camera()
    scene = SyntheticScene(spec, intr)
    streams = np.random.SeedSequence(noise.seed).spawn(spec.frame_count)
    for k, pose in enumerate(spec.poses()):
        clean = render_depth(shape, intr, pose).data
        if not np.any(clean > 0):
            log.warning("frame %d sees no geometry; emitting an all-invalid frame", k)
        noisy = noise.apply(clean, np.random.default_rng(streams[k]))
        scene.clean_depths.append(clean)
        scene.frames.append(Frame(DepthMap(noisy), pose, intr))
    if with_mesh and spec.bounds is not None:
        scene.gt_mesh = ground_truth_mesh(spec, gt_step)
    return scene
