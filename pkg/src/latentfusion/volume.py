"""Implicit neural volume: a sparse grid of latent codes decoded by trilinear blending.

Voxel (i, j, k) is centered at ``origin + voxel_size * (i, j, k)``. A query
blends the decoder outputs of the 8 surrounding voxels; corners that are not
allocated (or carry zero fusion weight) are dropped and the remaining
trilinear weights renormalized. Below half the weight mass the point is
reported as unobserved (NaN in batch APIs, ``None`` for single points).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import Codec
from .grid import SparseGrid, trilinear_corners

MIN_WEIGHT_MASS = 0.5


class VolumeError(ValueError):
    pass


@dataclass
class VoxelEntry:
    latent: np.ndarray
    weight: float


@dataclass
class InterpolationStencil:
    indices: np.ndarray  # (8, 3)
    weights: np.ndarray  # (8,)
    present: np.ndarray  # (8,) bool, allocated with non-zero fusion weight


@dataclass
class DecodeContext:
    """What ``decode_backward`` needs from a batched decode."""

    query: np.ndarray  # (R,) query id of each decoded row
    rows: np.ndarray  # (R,) volume row of each decoded corner
    weight: np.ndarray  # (R,) renormalized trilinear weight
    cache: object


class ImplicitNeuralVolume:
    def __init__(self, voxel_size: float = 0.02, latent_dim: int = 8, origin=(0.0, 0.0, 0.0)):
        if not voxel_size > 0:
            raise VolumeError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self.latent_dim = int(latent_dim)
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.grid = SparseGrid()
        self.latents = np.zeros((0, self.latent_dim))
        self.weights = np.zeros(0)

    def __len__(self) -> int:
        return len(self.grid)

    def same_layout(self, other) -> bool:
        return (self.voxel_size == other.voxel_size and self.latent_dim == other.latent_dim
                and np.array_equal(self.origin, other.origin))

    def copy(self) -> ImplicitNeuralVolume:
        v = ImplicitNeuralVolume(self.voxel_size, self.latent_dim, self.origin)
        v.grid = self.grid.copy()
        v.latents = self.latents.copy()
        v.weights = self.weights.copy()
        return v

    def indices(self) -> np.ndarray:
        return self.grid.indices()

    def centers(self, ijk: np.ndarray | None = None) -> np.ndarray:
        ijk = self.indices() if ijk is None else np.asarray(ijk)
        return self.origin + self.voxel_size * ijk

    def voxel_of(self, x: np.ndarray) -> np.ndarray:
        """Index of the voxel whose center is nearest to each point."""
        return np.round((np.asarray(x) - self.origin) / self.voxel_size).astype(np.int64)

    # sparse map

    def allocate(self, ijk) -> np.ndarray:
        """Rows for ``ijk``; absent voxels get a zero latent and weight 0."""
        rows = self.grid.insert(np.asarray(ijk, dtype=np.int64).reshape(-1, 3))
        grow = len(self.grid) - len(self.weights)
        if grow > 0:
            self.latents = np.concatenate([self.latents, np.zeros((grow, self.latent_dim))])
            self.weights = np.concatenate([self.weights, np.zeros(grow)])
        return rows

    def get(self, ijk) -> VoxelEntry | None:
        row = int(self.grid.lookup(np.asarray(ijk).reshape(1, 3))[0])
        if row < 0:
            return None
        return VoxelEntry(self.latents[row].copy(), float(self.weights[row]))

    def set(self, ijk, entry: VoxelEntry):
        latent = np.asarray(entry.latent, dtype=np.float64).reshape(-1)
        if latent.shape[0] != self.latent_dim:
            raise VolumeError(f"latent dim {latent.shape[0]} != volume latent dim {self.latent_dim}")
        if entry.weight < 0:
            raise VolumeError("weights are non-negative")
        row = self.allocate(np.asarray(ijk).reshape(1, 3))[0]
        self.latents[row] = latent
        self.weights[row] = entry.weight

    # interpolation

    def stencil_batch(self, x: np.ndarray):
        """(indices (N, 8, 3), trilinear weights (N, 8), rows (N, 8), -1 where unusable)."""
        idx, w = trilinear_corners(np.asarray(x, dtype=np.float64).reshape(-1, 3), self.origin, self.voxel_size)
        rows = self.grid.lookup(idx)
        ok = rows >= 0
        ok[ok] = self.weights[rows[ok]] > 0
        return idx, w, np.where(ok, rows, -1)

    def trilinear_stencil(self, x) -> InterpolationStencil:
        idx, w, rows = self.stencil_batch(np.asarray(x).reshape(1, 3))
        return InterpolationStencil(idx[0], w[0], rows[0] >= 0)

    def _decode_rows(self, x: np.ndarray):
        """Flattened (query, row, renormalized weight, local coord) for observed queries."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        idx, w, rows = self.stencil_batch(x)
        present = rows >= 0
        mass = np.sum(np.where(present, w, 0.0), axis=1)
        observed = mass >= MIN_WEIGHT_MASS
        use = present & observed[:, None] & (w > 0)
        q, c = np.nonzero(use)
        wn = w[q, c] / mass[q]
        return observed, q, rows[q, c], wn, idx[q, c]

    def decode_sdf_batch(self, codec: Codec, x: np.ndarray, with_grad: bool = False,
                         chunk: int = 65536):
        """SDF in meters for each point, NaN where unobserved.

        With ``with_grad`` also returns a ``DecodeContext`` for
        ``decode_backward``; the whole batch is then decoded in one pass.
        """
        if codec.latent_dim != self.latent_dim:
            raise VolumeError(f"codec latent dim {codec.latent_dim} != volume {self.latent_dim}")
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        r = codec.patch_radius
        observed, q, rows, wn, vidx = self._decode_rows(x)
        local = (x[q] - self.centers(vidx)) / r
        out = np.zeros(len(x))
        if with_grad:
            pred, cache = codec.decode_batch(self.latents[rows], local)
            out += np.bincount(q, weights=wn * pred * r, minlength=len(x))
            out[~observed] = np.nan
            return out, DecodeContext(q, rows, wn, cache)
        contrib = np.empty(len(q))
        for s in range(0, len(q), chunk):
            sl = slice(s, s + chunk)
            inp = np.concatenate([self.latents[rows[sl]], local[sl]], axis=1)
            contrib[sl] = codec.decoder.predict(inp)[:, 0]
        out += np.bincount(q, weights=wn * contrib * r, minlength=len(x))
        out[~observed] = np.nan
        return out

    def decode_backward(self, codec: Codec, ctx: DecodeContext, d_sdf: np.ndarray):
        """Latent gradients for the rows touched by a decode, given dL/ds per query.

        Returns (unique rows, (n_rows, latent_dim) gradients). The decoder is frozen.
        """
        d_sdf = np.asarray(d_sdf, dtype=np.float64)
        d_out = d_sdf[ctx.query] * ctx.weight * codec.patch_radius
        d_lat, _, _ = codec.decode_backward(ctx.cache, d_out, param_grads=False)
        uniq, inv = np.unique(ctx.rows, return_inverse=True)
        grads = np.zeros((len(uniq), self.latent_dim))
        np.add.at(grads, inv, d_lat)
        return uniq, grads

    def decode_sdf(self, codec: Codec, x) -> float | None:
        s = self.decode_sdf_batch(codec, np.asarray(x).reshape(1, 3))[0]
        return None if np.isnan(s) else float(s)

    def decode_sdf_backward(self, codec: Codec, x, d_sdf: float) -> dict:
        """{voxel index tuple: dL/dlatent} for one query point."""
        s, ctx = self.decode_sdf_batch(codec, np.asarray(x).reshape(1, 3), with_grad=True)
        if np.isnan(s[0]):
            raise VolumeError("gradient requested at an unobserved point")
        rows, grads = self.decode_backward(codec, ctx, np.array([d_sdf]))
        ijk = self.indices()[rows]
        return {tuple(int(v) for v in k): g for k, g in zip(ijk, grads)}

    def observed_mask(self, x: np.ndarray) -> np.ndarray:
        _, w, rows = self.stencil_batch(x)
        return np.sum(np.where(rows >= 0, w, 0.0), axis=1) >= MIN_WEIGHT_MASS
