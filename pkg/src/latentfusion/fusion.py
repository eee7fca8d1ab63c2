"""Bi-level fusion of depth frames into an implicit neural volume.

Local level: each frame is encoded into a single-view latent volume and
merged by per-voxel weighted averaging of latents. Global level: latents are
optimized with Adam so that decoded SDF matches the projective TSDF of
sampled keyframe rays under an L1 loss (decoder frozen).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .codec import Codec
from .geometry import CameraIntrinsics, DepthMap, Pose, Ray, estimate_normals, pixel_directions, transform
from .grid import pack, unpack
from .nn import NonFiniteGradientError
from .volume import ImplicitNeuralVolume, VolumeError

log = logging.getLogger(__name__)

NEAR_PLANE = 0.1


@dataclass
class FusionConfig:
    pixels_per_iter: int = 5000
    coarse_density: float = 5.0  # samples per meter
    fine_count: int = 20
    trunc_delta: float = 0.10
    iters_per_frame: int = 5
    max_samples_per_keyframe: int = 5
    lr: float = 0.01
    weight_cap: float = 100.0
    min_points: int = 3
    voxel_size: float = 0.02
    local_fusion: bool = True
    # latent init for voxels first seen when local fusion is disabled
    random_init_std: float = 0.1
    ray_chunk: int = 1000

    def __post_init__(self):
        for name in ("pixels_per_iter", "coarse_density", "fine_count", "trunc_delta",
                     "max_samples_per_keyframe", "lr", "weight_cap", "voxel_size"):
            if getattr(self, name) < 0 or (name != "lr" and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive")
        if self.iters_per_frame < 0:
            raise ValueError("iters_per_frame must be non-negative")


@dataclass(frozen=True)
class Frame:
    depth: DepthMap
    pose: Pose
    intrinsics: CameraIntrinsics


@dataclass
class FrameStats:
    encode_ms: float = 0.0
    fuse_ms: float = 0.0
    global_ms: float = 0.0
    iters: int = 0
    losses: list = field(default_factory=list)
    voxels: int = 0

    def to_dict(self) -> dict:
        return {"encode_ms": self.encode_ms, "fuse_ms": self.fuse_ms, "global_ms": self.global_ms,
                "iters": self.iters, "losses": list(self.losses), "voxels": self.voxels}


# local level

def _patch_pairs(points: np.ndarray, vol: ImplicitNeuralVolume, radius: float):
    """(point id, voxel index) for every voxel touched by a point whose patch cube contains that point."""
    touched = unpack(np.unique(pack(vol.voxel_of(points))))
    reach = int(np.ceil(radius / vol.voxel_size - 1e-9))
    base = vol.voxel_of(points)
    offs = np.stack(np.meshgrid(*[np.arange(-reach, reach + 1)] * 3, indexing="ij"), -1).reshape(-1, 3)
    touched_vol = ImplicitNeuralVolume(vol.voxel_size, 1, vol.origin)
    touched_vol.allocate(touched)
    pid, vox = [], []
    for off in offs:
        cand = base + off
        inside = np.max(np.abs(points - vol.centers(cand)), axis=1) <= radius
        inside &= touched_vol.grid.lookup(cand) >= 0
        pid.append(np.nonzero(inside)[0])
        vox.append(cand[inside])
    return np.concatenate(pid), np.concatenate(vox)


def point_patches(points: np.ndarray, normals: np.ndarray, vol: ImplicitNeuralVolume, radius: float,
                  min_points: int = 3):
    """Group world points into per-voxel patches.

    Returns (voxel indices (V, 3), counts (V,), features (N, 6), segments (N,))
    with features normalized to the patch frame.
    """
    if len(points) == 0:
        return np.zeros((0, 3), np.int64), np.zeros(0), np.zeros((0, 6)), np.zeros(0, np.int64)
    pid, vox = _patch_pairs(points, vol, radius)
    keys, seg = np.unique(pack(vox), return_inverse=True)
    uniq = unpack(keys)
    seg = seg.reshape(-1)
    counts = np.bincount(seg, minlength=len(uniq))
    keep = counts >= min_points
    remap = np.full(len(uniq), -1)
    remap[keep] = np.arange(int(keep.sum()))
    seg = remap[seg]
    sel = seg >= 0
    pid, seg = pid[sel], seg[sel]
    order = np.argsort(seg, kind="stable")
    pid, seg = pid[order], seg[order]
    uniq = uniq[keep]
    feats = np.concatenate([(points[pid] - vol.centers(uniq)[seg]) / radius, normals[pid]], axis=1)
    return uniq, counts[keep].astype(np.float64), feats, seg


def frame_points(frame: Frame):
    """World-frame points and normals of a frame's valid, normal-bearing pixels."""
    pc = transform(frame.pose, estimate_normals(frame.depth, frame.intrinsics))
    return pc.points, pc.normals


def encode_depth_to_volume(frame: Frame, codec: Codec, cfg: FusionConfig,
                           origin=(0.0, 0.0, 0.0), chunk: int = 4096) -> ImplicitNeuralVolume:
    sv = ImplicitNeuralVolume(cfg.voxel_size, codec.latent_dim, origin)
    pts, nrm = frame_points(frame)
    ijk, counts, feats, seg = point_patches(pts, nrm, sv, codec.patch_radius, cfg.min_points)
    if len(ijk) == 0:
        return sv
    latents = np.zeros((len(ijk), codec.latent_dim))
    bounds = np.searchsorted(seg, np.arange(0, len(ijk) + chunk, chunk))
    for c, start in enumerate(range(0, len(ijk), chunk)):
        lo, hi = bounds[c], bounds[c + 1]
        n = min(chunk, len(ijk) - start)
        latents[start:start + n] = codec.encode_inference(feats[lo:hi], seg[lo:hi] - start, n)
    rows = sv.allocate(ijk)
    sv.latents[rows] = latents
    sv.weights[rows] = counts
    return sv


def local_fuse(vol: ImplicitNeuralVolume, sv: ImplicitNeuralVolume, cfg: FusionConfig) -> None:
    """Weighted running average of latents; weights accumulate up to ``weight_cap``."""
    if not vol.same_layout(sv):
        raise VolumeError("single-view volume grid does not match the global volume")
    if len(sv) == 0:
        return
    src = np.nonzero(sv.weights > 0)[0]
    rows = vol.allocate(sv.indices()[src])
    w_prev = vol.weights[rows]
    w_s = sv.weights[src]
    total = w_prev + w_s
    blended = (w_prev[:, None] * vol.latents[rows] + w_s[:, None] * sv.latents[src]) / total[:, None]
    # a voxel without prior weight takes the new latent exactly
    vol.latents[rows] = np.where((w_prev == 0)[:, None], sv.latents[src], blended)
    vol.weights[rows] = np.minimum(total, cfg.weight_cap)


def random_init_fuse(vol: ImplicitNeuralVolume, frame: Frame, codec: Codec, cfg: FusionConfig,
                     rng: np.random.Generator) -> None:
    """Allocate the frame's voxels with random latents instead of encoding them."""
    pts, nrm = frame_points(frame)
    ijk, counts, _, _ = point_patches(pts, nrm, vol, codec.patch_radius, cfg.min_points)
    if len(ijk) == 0:
        return
    before = len(vol)
    rows = vol.allocate(ijk)
    fresh = rows >= before
    vol.latents[rows[fresh]] = rng.normal(0.0, cfg.random_init_std, size=(int(fresh.sum()), vol.latent_dim))
    vol.weights[rows] = np.minimum(vol.weights[rows] + counts, cfg.weight_cap)


# global level

def projective_tsdf(measured_depth, sample_depth, delta: float):
    """Clamped along-ray signed distance: positive in front of the measured surface."""
    m = np.asarray(measured_depth, dtype=np.float64)
    s = np.asarray(sample_depth, dtype=np.float64)
    if np.any(m <= 0) or np.any(s <= 0):
        raise ValueError("depths must be positive")
    out = np.clip(m - s, -delta, delta)
    return float(out) if out.ndim == 0 else out


def coarse_count(measured_depth: float, cfg: FusionConfig) -> int:
    span = measured_depth + cfg.trunc_delta - NEAR_PLANE
    return max(1, int(np.ceil(span * cfg.coarse_density - 1e-9)))


def sample_depths(measured: np.ndarray, cfg: FusionConfig, rng: np.random.Generator):
    """Stratified coarse + fine sample depths for a batch of rays.

    Returns (depths (P, S), valid (P, S)); rows are padded to the longest
    coarse set, padding marked invalid.
    """
    measured = np.asarray(measured, dtype=np.float64)
    p = len(measured)
    n_coarse = np.array([coarse_count(d, cfg) for d in measured], dtype=np.int64)
    c_max = int(n_coarse.max()) if p else 0
    lo = np.full(p, NEAR_PLANE)
    hi = measured + cfg.trunc_delta
    k = np.arange(c_max)[None, :]
    u = rng.random((p, c_max))
    coarse = lo[:, None] + (k + u) * ((hi - lo) / n_coarse)[:, None]
    c_valid = k < n_coarse[:, None]
    f_lo = np.maximum(measured - 2.0 * cfg.trunc_delta, NEAR_PLANE)
    kf = np.arange(cfg.fine_count)[None, :]
    uf = rng.random((p, cfg.fine_count))
    fine = f_lo[:, None] + (kf + uf) * ((hi - f_lo) / cfg.fine_count)[:, None]
    depths = np.concatenate([coarse, fine], axis=1)
    valid = np.concatenate([c_valid, np.ones_like(fine, dtype=bool)], axis=1)
    return depths, valid


def sample_ray_points(ray: Ray, measured_depth: float, cfg: FusionConfig, rng: np.random.Generator,
                      depth_per_unit: float = 1.0) -> list[tuple[np.ndarray, float]]:
    """Hierarchical samples on one ray paired with their projective TSDF.

    ``depth_per_unit`` converts ray length to depth (the cosine between the
    ray and the optical axis); with 1.0 depth is measured along the ray.
    """
    if measured_depth <= 0:
        raise ValueError("measured depth must be positive")
    depths, valid = sample_depths(np.array([measured_depth]), cfg, rng)
    depths = depths[0][valid[0]]
    sbar = projective_tsdf(np.full(len(depths), measured_depth), depths, cfg.trunc_delta)
    pts = ray.at(depths / depth_per_unit)
    return [(p, float(s)) for p, s in zip(pts, sbar)]


@dataclass
class KeyframeStore:
    max_samples: int = 5
    frames: list = field(default_factory=list)
    budgets: list = field(default_factory=list)

    def add(self, frame: Frame):
        self.frames.append(frame)
        self.budgets.append(self.max_samples)

    def available(self) -> np.ndarray:
        return np.nonzero(np.asarray(self.budgets) > 0)[0]

    def draw(self, rng: np.random.Generator) -> Frame | None:
        avail = self.available()
        if len(avail) == 0:
            return None
        k = int(avail[rng.integers(len(avail))])
        self.budgets[k] -= 1
        return self.frames[k]

    def __len__(self) -> int:
        return len(self.frames)


class LatentAdam:
    """Adam over volume latents that only updates rows with a gradient.

    Moment buffers live per voxel row and grow with the volume; the step
    counter is shared, as in sparse Adam variants.
    """

    def __init__(self, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = np.zeros((0, 0))
        self.v = np.zeros((0, 0))

    def _grow(self, n: int, d: int):
        if self.m.shape[0] < n:
            pad = n - self.m.shape[0]
            self.m = np.concatenate([self.m.reshape(-1, d), np.zeros((pad, d))])
            self.v = np.concatenate([self.v.reshape(-1, d), np.zeros((pad, d))])

    def step(self, vol: ImplicitNeuralVolume, rows: np.ndarray, grads: np.ndarray):
        if not np.all(np.isfinite(grads)):
            raise NonFiniteGradientError("non-finite latent gradient; update rejected")
        self._grow(len(vol), vol.latent_dim)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        m = self.beta1 * self.m[rows] + (1.0 - self.beta1) * grads
        v = self.beta2 * self.v[rows] + (1.0 - self.beta2) * grads * grads
        self.m[rows] = m
        self.v[rows] = v
        vol.latents[rows] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def sample_frame_rays(frame: Frame, n_pixels: int, rng: np.random.Generator):
    """Pick up to ``n_pixels`` valid pixels; returns (origin, world dirs with unit depth, measured depth)."""
    d = frame.depth.data
    vv, uu = np.nonzero(d > 0)
    if len(vv) == 0:
        return frame.pose.translation, np.zeros((0, 3)), np.zeros(0)
    pick = rng.choice(len(vv), size=min(n_pixels, len(vv)), replace=False)
    pick.sort()
    u, v = uu[pick], vv[pick]
    dirs = pixel_directions(frame.intrinsics, u, v) @ frame.pose.R.T
    return frame.pose.translation, dirs, d[v, u]


def render_loss(vol: ImplicitNeuralVolume, codec: Codec, frame: Frame, cfg: FusionConfig,
                rng: np.random.Generator, need_grad: bool = True):
    """Mean L1 between decoded SDF and projective TSDF on sampled rays of ``frame``.

    Returns (loss or None if nothing decodable, touched rows, gradients of the mean loss).
    """
    origin, dirs, measured = sample_frame_rays(frame, cfg.pixels_per_iter, rng)
    total, count = 0.0, 0
    row_chunks, grad_chunks = [], []
    for s in range(0, len(measured), cfg.ray_chunk):
        m = measured[s:s + cfg.ray_chunk]
        depths, valid = sample_depths(m, cfg, rng)
        pts = origin + depths[..., None] * dirs[s:s + cfg.ray_chunk, None, :]
        sbar = np.clip(m[:, None] - depths, -cfg.trunc_delta, cfg.trunc_delta)
        pts, sbar = pts[valid], sbar[valid]
        keep = vol.observed_mask(pts)
        pts, sbar = pts[keep], sbar[keep]
        if len(pts) == 0:
            continue
        if need_grad:
            sdf, ctx = vol.decode_sdf_batch(codec, pts, with_grad=True)
        else:
            sdf = vol.decode_sdf_batch(codec, pts)
        resid = sdf - sbar
        total += float(np.sum(np.abs(resid)))
        count += len(resid)
        if need_grad:
            rows, grads = vol.decode_backward(codec, ctx, np.sign(resid))
            row_chunks.append(rows)
            grad_chunks.append(grads)
    if count == 0:
        return None, np.zeros(0, np.int64), np.zeros((0, vol.latent_dim))
    if not need_grad:
        return total / count, None, None
    rows = np.concatenate(row_chunks)
    grads = np.concatenate(grad_chunks)
    uniq, inv = np.unique(rows, return_inverse=True)
    acc = np.zeros((len(uniq), vol.latent_dim))
    np.add.at(acc, inv, grads)
    return total / count, uniq, acc / count


def global_fuse_iteration(vol: ImplicitNeuralVolume, codec: Codec, keyframes: KeyframeStore,
                          cfg: FusionConfig, rng: np.random.Generator, optimizer: LatentAdam):
    """One rendering-loss Adam step on a randomly drawn keyframe.

    Returns the mean L1 loss over decoded samples, or None when no keyframe
    has budget left (nothing is changed then).
    """
    frame = keyframes.draw(rng)
    if frame is None:
        return None
    loss, rows, grads = render_loss(vol, codec, frame, cfg, rng)
    if loss is None:
        return float("nan")
    optimizer.step(vol, rows, grads)
    return loss


class BiLevelFusion:
    """Stateful driver: one global volume, its keyframes, RNG and latent optimizer."""

    def __init__(self, codec: Codec, cfg: FusionConfig | None = None, seed: int = 0, origin=(0.0, 0.0, 0.0)):
        self.codec = codec
        self.cfg = cfg or FusionConfig()
        self.volume = ImplicitNeuralVolume(self.cfg.voxel_size, codec.latent_dim, origin)
        self.keyframes = KeyframeStore(self.cfg.max_samples_per_keyframe)
        self.optimizer = LatentAdam(self.cfg.lr)
        self.rng = np.random.default_rng(seed)

    def integrate(self, frame: Frame) -> FrameStats:
        return integrate_frame(self.volume, frame, self.codec, self.keyframes, self.cfg, self.rng, self.optimizer)


def integrate_frame(vol: ImplicitNeuralVolume, frame: Frame, codec: Codec, keyframes: KeyframeStore,
                    cfg: FusionConfig, rng: np.random.Generator, optimizer: LatentAdam | None = None) -> FrameStats:
    """Encode, fuse locally (unless disabled), register as keyframe, then run global iterations."""
    optimizer = optimizer or LatentAdam(cfg.lr)
    stats = FrameStats()
    t0 = time.perf_counter()
    sv = None
    if cfg.local_fusion:
        sv = encode_depth_to_volume(frame, codec, cfg, vol.origin)
    t1 = time.perf_counter()
    if sv is not None:
        local_fuse(vol, sv, cfg)
    else:
        random_init_fuse(vol, frame, codec, cfg, rng)
    t2 = time.perf_counter()
    keyframes.add(frame)
    for _ in range(cfg.iters_per_frame):
        loss = global_fuse_iteration(vol, codec, keyframes, cfg, rng, optimizer)
        if loss is None:
            break
        stats.losses.append(loss)
        stats.iters += 1
    t3 = time.perf_counter()
    stats.encode_ms, stats.fuse_ms, stats.global_ms = 1000 * (t1 - t0), 1000 * (t2 - t1), 1000 * (t3 - t2)
    stats.voxels = len(vol)
    return stats
