"""Synthetic local-patch dataset and joint encoder/decoder training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .codec import Codec
from .geometry import CameraIntrinsics, estimate_normals, transform
from .nn import AdamState, adam_step
from .shapes import Box, Cylinder, Plane, Shape, Sphere, Wedge, look_at, render_depth

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class PatchConfig:
    patch_radius: float = 0.03
    seeds_per_view: int = 2000
    queries_per_patch: int = 1000
    surface_noise_sigma: float = 0.005
    normal_perturb_sigma: float = 0.15
    views_per_shape: int = 20
    # patch centers are offset from their surface seed by up to this much per
    # axis, matching voxel centers that do not sit on the surface
    center_jitter: float = 0.01
    max_points_per_patch: int = 256
    image_size: tuple = (160, 120)
    focal: float = 200.0
    view_distance: tuple = (1.0, 3.0)

    def __post_init__(self):
        for name in ("patch_radius", "seeds_per_view", "queries_per_patch", "views_per_shape"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.surface_noise_sigma < 0 or self.normal_perturb_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")


@dataclass
class PatchSample:
    local_points: np.ndarray  # (K, 6): normalized position + unit normal
    query_points: np.ndarray  # (M, 3) normalized
    query_sdf: np.ndarray  # (M,) meters, clamped to +-patch_radius
    shape_id: int = 0


def default_shapes(rng: np.random.Generator | None = None, n_random: int = 0) -> list[Shape]:
    """Desk-scale shape family: planes, spheres, boxes, cylinders, dihedral edges."""
    shapes: list[Shape] = [
        Plane([0, 0, 0], [0, 0, 1]),
        Plane([0, 0, 0], [0.3, -0.2, 1.0]),
        Sphere([0, 0, 0], 0.5),
        Sphere([0, 0, 0], 0.15),
        Sphere([0, 0, 0], 0.06),
        Box([0, 0, 0], [0.4, 0.3, 0.25]),
        Box([0, 0, 0], [0.5, 0.01, 0.4]),
        Box([0, 0, 0], [1.5, 1.5, 1.5], hollow=True),
        Cylinder([0, 0, 0], [0, 0, 1], 0.2, 0.4),
        Cylinder([0, 0, 0], [1, 0, 0.3], 0.05, 0.5),
        Wedge([0, 0, 0], [0, 0, 1], [1, 0, 0]),
        Wedge([0, 0, 0], [0, 0, 1], [1, 0, 1.5]),
    ]
    if n_random:
        rng = rng or np.random.default_rng(0)
        for _ in range(n_random):
            kind = rng.integers(3)
            if kind == 0:
                shapes.append(Sphere([0, 0, 0], rng.uniform(0.05, 0.6)))
            elif kind == 1:
                shapes.append(Box([0, 0, 0], rng.uniform(0.01, 0.5, size=3)))
            else:
                shapes.append(Cylinder([0, 0, 0], rng.normal(size=3), rng.uniform(0.03, 0.4), rng.uniform(0.1, 0.5)))
    return shapes


def _random_rotation_about(normals: np.ndarray, sigma: float, rng) -> np.ndarray:
    """Tilt each unit normal by a N(0, sigma) angle about a random perpendicular axis."""
    if sigma == 0:
        return normals
    rand = rng.normal(size=normals.shape)
    axis = np.cross(normals, rand)
    axis /= np.maximum(np.linalg.norm(axis, axis=1, keepdims=True), 1e-12)
    ang = rng.normal(0.0, sigma, size=len(normals))[:, None]
    # Rodrigues; axis is perpendicular to n so the dot term vanishes
    out = normals * np.cos(ang) + np.cross(axis, normals) * np.sin(ang)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def _view_points(shape: Shape, cfg: PatchConfig, rng, max_tries: int = 10):
    w, h = cfg.image_size
    intr = CameraIntrinsics(cfg.focal, cfg.focal, (w - 1) / 2, (h - 1) / 2, w, h)
    for _ in range(max_tries):
        if isinstance(shape, Box) and shape.hollow:
            eye = shape.center + rng.uniform(-0.5, 0.5, size=3) * shape.half_size
            target = eye + rng.normal(size=3)
        else:
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            eye = direction * rng.uniform(*cfg.view_distance)
            target = rng.normal(0.0, 0.05, size=3)
        if shape.sdf(eye[None])[0] <= 0.05:
            eye = -eye
            if shape.sdf(eye[None])[0] <= 0.05:
                continue
        pose = look_at(eye, target, up=rng.normal(size=3))
        depth = render_depth(shape, intr, pose, t_max=8.0)
        pc = estimate_normals(depth, intr)
        if len(pc) >= 50:
            world = transform(pose, pc)
            return world.points, pose
    return None, None


def generate_patch_dataset(shapes: list[Shape], cfg: PatchConfig, seed: int) -> list[PatchSample]:
    """Render each shape from random viewpoints and cut noisy local patches.

    Every (shape, view) pair draws from its own RNG stream spawned from
    ``seed`` so the result does not depend on evaluation order.
    """
    root = np.random.SeedSequence(seed)
    streams = root.spawn(len(shapes) * cfg.views_per_shape)
    r = cfg.patch_radius
    out: list[PatchSample] = []
    for si, shape in enumerate(shapes):
        for vi in range(cfg.views_per_shape):
            rng = np.random.default_rng(streams[si * cfg.views_per_shape + vi])
            clean, pose = _view_points(shape, cfg, rng)
            if clean is None:
                log.warning("shape %d: no visible surface after retries, view skipped", si)
                continue
            normals = shape.normal(clean)
            view_dir = clean - pose.translation
            view_dir /= np.linalg.norm(view_dir, axis=1, keepdims=True)
            noisy = clean + view_dir * rng.normal(0.0, cfg.surface_noise_sigma, size=(len(clean), 1))
            noisy_n = _random_rotation_about(normals, cfg.normal_perturb_sigma, rng)
            seeds = rng.choice(len(clean), size=min(cfg.seeds_per_view, len(clean)), replace=False)
            for s in seeds:
                center = clean[s] + rng.uniform(-cfg.center_jitter, cfg.center_jitter, size=3)
                inside = np.max(np.abs(noisy - center), axis=1) <= r
                idx = np.nonzero(inside)[0]
                if len(idx) == 0:
                    continue
                if len(idx) > cfg.max_points_per_patch:
                    idx = rng.choice(idx, size=cfg.max_points_per_patch, replace=False)
                feats = np.concatenate([(noisy[idx] - center) / r, noisy_n[idx]], axis=1)
                q = _sample_queries(shape, clean[idx], normals[idx], center, cfg, rng)
                sdf = np.clip(shape.sdf(q), -r, r)
                out.append(PatchSample(feats, (q - center) / r, sdf, si))
    return out


def _sample_queries(shape, surf, normals, center, cfg: PatchConfig, rng) -> np.ndarray:
    r = cfg.patch_radius
    m = cfg.queries_per_patch
    n_near = m // 2
    band = 2.0 * cfg.surface_noise_sigma
    near = np.empty((0, 3))
    for _ in range(20):
        if len(near) >= n_near:
            break
        pick = rng.integers(len(surf), size=2 * n_near)
        cand = surf[pick] + normals[pick] * rng.uniform(-band, band, size=(2 * n_near, 1))
        cand = cand[np.max(np.abs(cand - center), axis=1) <= r]
        near = np.concatenate([near, cand])
    near = near[:n_near]
    uniform = center + rng.uniform(-r, r, size=(m - len(near), 3))
    return np.concatenate([near, uniform])


def pack_batch(samples: list[PatchSample]):
    feats = np.concatenate([s.local_points for s in samples])
    segs = np.concatenate([np.full(len(s.local_points), i) for i, s in enumerate(samples)])
    return feats, segs


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    epochs: int = 20
    seed: int = 0
    queries_per_step: int = 256  # random subset of each patch's queries per step
    latent_dim: int = 8


@dataclass
class TrainResult:
    codec: Codec
    loss_curve: list = field(default_factory=list)


def _batch_loss_and_grads(codec: Codec, batch: list[PatchSample], q_idx: list[np.ndarray]):
    r = codec.patch_radius
    feats, segs = pack_batch(batch)
    latents, ecache = codec.encode_batch(feats, segs, len(batch))
    rows = np.concatenate([np.full(len(q), i) for i, q in enumerate(q_idx)])
    xq = np.concatenate([s.query_points[q] for s, q in zip(batch, q_idx)])
    gt = np.concatenate([s.query_sdf[q] for s, q in zip(batch, q_idx)]) / r
    pred, dcache = codec.decode_batch(latents[rows], xq)
    resid = pred - gt
    loss = float(np.mean(np.abs(resid))) * r
    d_pred = np.sign(resid) / len(resid)
    d_lat_rows, _, dec_grads = codec.decode_backward(dcache, d_pred, param_grads=True)
    d_lat = np.zeros_like(latents)
    np.add.at(d_lat, rows, d_lat_rows)
    _, enc_grads = codec.encode_backward(ecache, d_lat)
    return loss, enc_grads + dec_grads


def train_codec(dataset: list[PatchSample], cfg: TrainConfig, patch_radius: float = 0.03,
                codec: Codec | None = None) -> TrainResult:
    """Minimize mean L1 between decoded and ground-truth SDF with Adam.

    Returns the trained codec and the per-epoch mean loss in meters.
    """
    if not dataset:
        raise ValueError("empty training dataset")
    rng = np.random.default_rng(cfg.seed)
    if codec is None:
        codec = Codec.create(cfg.latent_dim, patch_radius, seed=cfg.seed)
    params = codec.params()
    state = AdamState.for_params(params, lr=cfg.lr)
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
            q_idx = [rng.choice(len(s.query_sdf), size=min(cfg.queries_per_step, len(s.query_sdf)), replace=False)
                     for s in batch]
            loss, grads = _batch_loss_and_grads(codec, batch, q_idx)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}; learning rate {cfg.lr} too high?")
            adam_step(params, grads, state)
            codec.encoder.touch()
            codec.decoder.touch()
            total += loss * len(batch)
            count += len(batch)
        curve.append(total / count)
        log.info("epoch %d: mean L1 %.5f m", epoch, curve[-1])
    return TrainResult(codec, curve)


def evaluate_codec(codec: Codec, dataset: list[PatchSample], batch_size: int = 64) -> float:
    """Mean |SDF error| in meters over every query of ``dataset``."""
    errs = []
    for start in range(0, len(dataset), batch_size):
        batch = dataset[start:start + batch_size]
        feats, segs = pack_batch(batch)
        latents, _ = codec.encode_batch(feats, segs, len(batch))
        rows = np.concatenate([np.full(len(s.query_sdf), i) for i, s in enumerate(batch)])
        xq = np.concatenate([s.query_points for s in batch])
        gt = np.concatenate([s.query_sdf for s in batch])
        pred, _ = codec.decode_batch(latents[rows], xq)
        errs.append(np.abs(pred * codec.patch_radius - gt))
    return float(np.mean(np.concatenate(errs)))


def desk_scale_configs(seed: int = 0, held_out: bool = False) -> tuple[PatchConfig, TrainConfig]:
    """Reduced dataset and schedule that train on one CPU core in a few minutes."""
    if held_out:
        return PatchConfig(seeds_per_view=20, views_per_shape=2, max_points_per_patch=64), TrainConfig(seed=seed)
    patch = PatchConfig(seeds_per_view=100, views_per_shape=4, max_points_per_patch=64)
    return patch, TrainConfig(epochs=10, queries_per_step=128, seed=seed)
