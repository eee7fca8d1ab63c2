"""Classic TSDF fusion on a sparse voxel grid (running weighted average, weight 1 per update).

Values are stored in meters, clamped to the truncation distance.
"""

from __future__ import annotations

import numpy as np

from .geometry import pixel_directions
from .grid import SparseGrid, pack, trilinear_corners, unpack

# corners contributing less than this trilinear weight may be missing
_NEGLIGIBLE = 1e-9


class TsdfVolume:
    def __init__(self, voxel_size: float = 0.02, truncation: float | None = None,
                 weight_cap: float = 100.0, origin=(0.0, 0.0, 0.0)):
        self.voxel_size = float(voxel_size)
        self.truncation = 4.0 * self.voxel_size if truncation is None else float(truncation)
        self.weight_cap = float(weight_cap)
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.grid = SparseGrid()
        self.tsdf = np.zeros(0)
        self.weights = np.zeros(0)

    def __len__(self) -> int:
        return len(self.grid)

    def indices(self) -> np.ndarray:
        return self.grid.indices()

    def centers(self, ijk=None) -> np.ndarray:
        ijk = self.indices() if ijk is None else np.asarray(ijk)
        return self.origin + self.voxel_size * ijk

    def allocate(self, ijk: np.ndarray) -> np.ndarray:
        rows = self.grid.insert(ijk)
        grow = len(self.grid) - len(self.tsdf)
        if grow > 0:
            self.tsdf = np.concatenate([self.tsdf, np.zeros(grow)])
            self.weights = np.concatenate([self.weights, np.zeros(grow)])
        return rows

    def candidate_voxels(self, frame) -> np.ndarray:
        """Voxels within truncation of the observed surface along each valid pixel ray."""
        d = frame.depth.data
        vv, uu = np.nonzero(d > 0)
        if len(vv) == 0:
            return np.zeros((0, 3), np.int64)
        dirs = pixel_directions(frame.intrinsics, uu, vv) @ frame.pose.R.T
        steps = np.arange(-self.truncation, self.truncation + 1e-12, 0.5 * self.voxel_size)
        z = d[vv, uu][:, None] + steps[None, :]
        pts = frame.pose.translation + z[..., None] * dirs[:, None, :]
        pts = pts[z > 0]
        ijk = np.round((pts - self.origin) / self.voxel_size).astype(np.int64)
        return unpack(np.unique(pack(ijk)))

    def integrate(self, frame) -> None:
        ijk = self.candidate_voxels(frame)
        if len(ijk) == 0:
            return
        intr = frame.intrinsics
        cam = (self.centers(ijk) - frame.pose.translation) @ frame.pose.R
        z = cam[:, 2]
        front = z > 1e-6
        u = np.full(len(z), -1, dtype=np.int64)
        v = np.full(len(z), -1, dtype=np.int64)
        u[front] = np.round(cam[front, 0] * intr.fx / z[front] + intr.cx).astype(np.int64)
        v[front] = np.round(cam[front, 1] * intr.fy / z[front] + intr.cy).astype(np.int64)
        inside = front & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
        meas = np.zeros(len(z))
        meas[inside] = frame.depth.data[v[inside], u[inside]]
        sdf = meas - z
        # voxels occluded far behind the measured surface carry no information
        use = inside & (meas > 0) & (sdf >= -self.truncation)
        if not np.any(use):
            return
        rows = self.allocate(ijk[use])
        t = np.clip(sdf[use], -self.truncation, self.truncation)
        w = self.weights[rows]
        self.tsdf[rows] = (w * self.tsdf[rows] + t) / (w + 1.0)
        self.weights[rows] = np.minimum(w + 1.0, self.weight_cap)

    def query_batch(self, x: np.ndarray) -> np.ndarray:
        """Trilinear SDF in meters, NaN where any contributing corner is missing."""
        idx, w = trilinear_corners(np.asarray(x, dtype=np.float64).reshape(-1, 3), self.origin, self.voxel_size)
        rows = self.grid.lookup(idx)
        ok = rows >= 0
        ok[ok] = self.weights[rows[ok]] > 0
        vals = np.where(ok, self.tsdf[np.maximum(rows, 0)], 0.0)
        out = np.sum(w * vals, axis=1)
        out[np.any(~ok & (w > _NEGLIGIBLE), axis=1)] = np.nan
        return out

    def query(self, x) -> float | None:
        s = self.query_batch(np.asarray(x).reshape(1, 3))[0]
        return None if np.isnan(s) else float(s)
