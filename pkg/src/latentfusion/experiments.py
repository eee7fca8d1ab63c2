"""Method arms, mesh extraction and evaluation shared by the CLI, scripts and acceptance tests."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .codec import Codec
from .fusion import (BiLevelFusion, FusionConfig, KeyframeStore, LatentAdam, global_fuse_iteration,
                     integrate_frame)
from .mesh import TriangleMesh, marching_cubes, point_metrics, sample_mesh_points, voxel_block_filter
from .tsdf import TsdfVolume
from .volume import ImplicitNeuralVolume

METHODS = ("bnv", "local-only", "global-random-init", "tsdf")


class ExperimentError(ValueError):
    pass


def method_config(method: str, base: FusionConfig | None = None, iters: int | None = None) -> FusionConfig:
    """Fusion settings of an ablation arm; ``iters`` overrides global iterations per frame."""
    base = base or FusionConfig()
    n = base.iters_per_frame if iters is None else iters
    if method == "bnv":
        return replace(base, local_fusion=True, iters_per_frame=n)
    if method == "local-only":
        return replace(base, local_fusion=True, iters_per_frame=0)
    if method == "global-random-init":
        return replace(base, local_fusion=False, iters_per_frame=n)
    raise ExperimentError(f"no fusion config for method {method!r}")


def select_frames(frames: list, every: int) -> list:
    if every < 1:
        raise ExperimentError("every must be >= 1")
    return frames[::every]


@dataclass
class FuseResult:
    volume: object
    frame_stats: list = field(default_factory=list)
    seconds: float = 0.0

    def stats(self) -> dict:
        return {"seconds": self.seconds, "voxels": len(self.volume), "frames": self.frame_stats}


def fuse_sequence(frames: list, method: str, codec: Codec | None = None, cfg: FusionConfig | None = None,
                  every: int = 1, iters: int | None = None, seed: int = 0) -> FuseResult:
    """Run one method over every ``every``-th frame."""
    if method not in METHODS:
        raise ExperimentError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    cfg = cfg or FusionConfig()
    t0 = time.perf_counter()
    chosen = select_frames(frames, every)
    if method == "tsdf":
        vol = TsdfVolume(cfg.voxel_size, weight_cap=cfg.weight_cap)
        stats = []
        for f in chosen:
            t = time.perf_counter()
            vol.integrate(f)
            stats.append({"integrate_ms": 1000 * (time.perf_counter() - t), "voxels": len(vol)})
        return FuseResult(vol, stats, time.perf_counter() - t0)
    if codec is None:
        raise ExperimentError(f"method {method!r} needs a codec")
    driver = BiLevelFusion(codec, method_config(method, cfg, iters), seed=seed)
    stats = [driver.integrate(f).to_dict() for f in chosen]
    return FuseResult(driver.volume, stats, time.perf_counter() - t0)


def volume_sdf(volume, codec: Codec | None = None):
    """(N, 3) -> (N,) SDF callable of either volume type, NaN where unobserved."""
    if isinstance(volume, TsdfVolume):
        return volume.query_batch
    if isinstance(volume, ImplicitNeuralVolume):
        if codec is None:
            raise ExperimentError("decoding a neural volume needs a codec")
        return lambda x: volume.decode_sdf_batch(codec, x)
    raise ExperimentError(f"cannot extract from {type(volume).__name__}")


def extract_mesh(volume, codec: Codec | None = None, step: float = 0.01, block: int = 32) -> TriangleMesh:
    """Marching cubes over the allocated region of a volume.

    The lattice is offset by half a step from the voxel cell borders so no
    sample lands exactly on the half-voxel boundary of the observed band.
    """
    ijk = volume.indices()
    if len(ijk) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    vs = volume.voxel_size
    centers = volume.centers(ijk)
    lo = centers.min(axis=0) - vs / 2 + step / 2
    hi = centers.max(axis=0) + vs / 2
    return marching_cubes(volume_sdf(volume, codec), (lo, hi), step, block=block,
                          block_filter=voxel_block_filter(ijk, volume.origin, vs))


def evaluate_mesh(pred: TriangleMesh, gt: TriangleMesh, thresholds=(0.025,), n: int = 100_000,
                  seed: int = 0) -> dict:
    """Metrics at several thresholds from one shared set of samples per mesh."""
    gt_pts = sample_mesh_points(gt, n, seed)
    if pred.is_empty:
        return {f"{t:g}": {"accuracy": 0.0, "completeness": 0.0, "f1": 0.0, "threshold": t, "n_samples": 0}
                for t in thresholds}
    pred_pts = sample_mesh_points(pred, n, seed)
    return {f"{t:g}": point_metrics(pred_pts, gt_pts, t).to_dict() for t in thresholds}


def convergence_curve(frames: list, codec: Codec, gt: TriangleMesh, init: str, cfg: FusionConfig | None = None,
                      rounds: int = 5, seed: int = 0, step: float = 0.02, threshold: float = 0.025,
                      n: int = 200_000) -> list:
    """Completeness after 0..rounds global rounds, starting from a local or random initialization.

    All frames are integrated first without global iterations; each round then
    runs one global iteration per keyframe.
    """
    if init not in ("local", "random"):
        raise ExperimentError("init must be 'local' or 'random'")
    cfg = replace(cfg or FusionConfig(), iters_per_frame=0, local_fusion=(init == "local"))
    rng = np.random.default_rng(seed)
    vol = ImplicitNeuralVolume(cfg.voxel_size, codec.latent_dim)
    keyframes = KeyframeStore(cfg.max_samples_per_keyframe)
    for f in frames:
        integrate_frame(vol, f, codec, keyframes, cfg, rng)
    opt = LatentAdam(cfg.lr)
    gt_pts = sample_mesh_points(gt, n, seed)

    def completeness():
        mesh = extract_mesh(vol, codec, step)
        if mesh.is_empty:
            return 0.0
        return point_metrics(sample_mesh_points(mesh, n, seed), gt_pts, threshold).completeness

    curve = [completeness()]
    for _ in range(rounds):
        for _ in range(len(frames)):
            global_fuse_iteration(vol, codec, keyframes, cfg, rng, opt)
        curve.append(completeness())
    return curve
