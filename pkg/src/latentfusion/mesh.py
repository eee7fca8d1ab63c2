"""Marching cubes over any SDF source, mesh point sampling and F-score metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .mc_tables import CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE


class MeshError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise MeshError("triangle index out of range")

    def __len__(self) -> int:
        return len(self.triangles)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def edge_use_counts(self) -> np.ndarray:
        """How many triangles use each undirected edge."""
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts


_TRI = np.full((256, 16), -1, dtype=np.int64)
for _case, _edges in enumerate(TRI_TABLE):
    _TRI[_case, :len(_edges)] = _edges
_NTRI = np.array([len(t) // 3 for t in TRI_TABLE])
_CORNER = np.array(CORNER_OFFSETS, dtype=np.int64)
_EDGE = np.array(EDGE_CORNERS, dtype=np.int64)
# each cell edge as (lower lattice offset, axis)
_EDGE_LO = np.minimum(_CORNER[_EDGE[:, 0]], _CORNER[_EDGE[:, 1]])
_EDGE_AXIS = np.argmax(np.abs(_CORNER[_EDGE[:, 1]] - _CORNER[_EDGE[:, 0]]), axis=1)


def _lattice_shape(region, step):
    lo = np.asarray(region[0], dtype=np.float64)
    hi = np.asarray(region[1], dtype=np.float64)
    n = np.floor((hi - lo) / step + 1e-9).astype(np.int64) + 1
    return lo, n


def marching_cubes(sdf_query: Callable[[np.ndarray], np.ndarray], region, step: float,
                   block: int = 32, block_filter: Callable[[np.ndarray, np.ndarray], bool] | None = None) -> TriangleMesh:
    """Extract the zero level set of ``sdf_query`` sampled on a regular lattice.

    ``sdf_query`` maps (N, 3) points to (N,) values, NaN marking unobserved
    points; cells touching an unobserved corner are skipped. ``region`` is
    (min corner, max corner). The lattice is processed in blocks of
    ``block``^3 cells; ``block_filter(lo, hi)`` may veto a block before it is
    queried. Triangles wind counter-clockwise seen from the positive side.
    """
    if not step > 0:
        raise MeshError("step must be positive")
    lo, n = _lattice_shape(region, step)
    if np.any(n < 2):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    strides = np.array([n[1] * n[2], n[2], 1], dtype=np.int64)
    edge_ids, edge_pos, tri_edges = [], [], []
    for bx in range(0, n[0] - 1, block):
        for by in range(0, n[1] - 1, block):
            for bz in range(0, n[2] - 1, block):
                b0 = np.array([bx, by, bz])
                b1 = np.minimum(b0 + block, n - 1)  # last lattice index (inclusive)
                if block_filter is not None and not block_filter(lo + b0 * step, lo + b1 * step):
                    continue
                _mc_block(sdf_query, lo, step, b0, b1, strides, edge_ids, edge_pos, tri_edges)
    if not tri_edges:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    ids = np.concatenate(edge_ids)
    pos = np.concatenate(edge_pos)
    uniq, first = np.unique(ids, return_index=True)
    verts = pos[first]
    tris = np.searchsorted(uniq, np.concatenate(tri_edges))
    return _clean(verts, tris)


def voxel_block_filter(ijk: np.ndarray, origin, voxel_size: float):
    """``block_filter`` keeping blocks that overlap an allocated voxel's interpolation support."""
    ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)
    origin = np.asarray(origin, dtype=np.float64)
    if len(ijk) == 0:
        return lambda lo, hi: False
    base = ijk.min(axis=0)
    dims = ijk.max(axis=0) - base + 1
    occ = np.zeros(dims + 1, dtype=np.int64)  # padded summed-volume table
    np.add.at(occ, tuple((ijk - base + 1).T), 1)
    sat = occ.cumsum(0).cumsum(1).cumsum(2)

    def keep(lo, hi):
        a = np.floor((np.asarray(lo) - origin) / voxel_size).astype(np.int64) - base
        b = np.ceil((np.asarray(hi) - origin) / voxel_size).astype(np.int64) - base
        a = np.clip(a, 0, dims)
        b = np.clip(b + 1, 0, dims)
        if np.any(b <= a):
            return False
        x0, y0, z0 = a
        x1, y1, z1 = b
        total = (sat[x1, y1, z1] - sat[x0, y1, z1] - sat[x1, y0, z1] - sat[x1, y1, z0]
                 + sat[x0, y0, z1] + sat[x0, y1, z0] + sat[x1, y0, z0] - sat[x0, y0, z0])
        return total > 0
    return keep


def _mc_block(query, lo, step, b0, b1, strides, edge_ids, edge_pos, tri_edges):
    shape = b1 - b0 + 1
    gi = np.stack(np.meshgrid(*[np.arange(b0[k], b1[k] + 1) for k in range(3)], indexing="ij"), -1)
    pts = lo + gi.reshape(-1, 3) * step
    vals = np.asarray(query(pts), dtype=np.float64).reshape(shape)
    if np.all(np.isnan(vals)):
        return
    cells = shape - 1
    corner_vals = np.stack([vals[o[0]:o[0] + cells[0], o[1]:o[1] + cells[1], o[2]:o[2] + cells[2]]
                            for o in _CORNER], axis=-1).reshape(-1, 8)
    ok = ~np.any(np.isnan(corner_vals), axis=1)
    case = np.sum((corner_vals < 0) << np.arange(8), axis=1)
    active = np.nonzero(ok & (case > 0) & (case < 255))[0]
    if len(active) == 0:
        return
    case = case[active]
    cv = corner_vals[active]
    cell_ijk = np.stack(np.unravel_index(active, cells), axis=1) + b0
    ntri = _NTRI[case]
    # one row per emitted triangle
    cell_of_tri = np.repeat(np.arange(len(active)), ntri)
    k_of_tri = np.arange(len(cell_of_tri)) - np.repeat(np.cumsum(ntri) - ntri, ntri)
    local_edges = np.stack([_TRI[case[cell_of_tri], 3 * k_of_tri + j] for j in range(3)], axis=1)
    # global id of a lattice edge: 3 * (lower lattice point linear index) + axis
    lo_pt = cell_ijk[cell_of_tri][:, None, :] + _EDGE_LO[local_edges]
    gid = 3 * (lo_pt @ strides) + _EDGE_AXIS[local_edges]
    # interpolate every referenced edge
    c0 = _EDGE[local_edges, 0]
    c1 = _EDGE[local_edges, 1]
    rows = cell_of_tri[:, None]
    v0 = cv[rows, c0]
    v1 = cv[rows, c1]
    p0 = cell_ijk[cell_of_tri][:, None, :] + _CORNER[c0]
    p1 = cell_ijk[cell_of_tri][:, None, :] + _CORNER[c1]
    t = (v0 / (v0 - v1))[..., None]
    pos = lo + (p0 + t * (p1 - p0)) * step
    edge_ids.append(gid.reshape(-1))
    edge_pos.append(pos.reshape(-1, 3))
    tri_edges.append(gid)


def _clean(verts: np.ndarray, tris: np.ndarray) -> TriangleMesh:
    """Merge coincident vertices, drop degenerate triangles, compact, fix winding."""
    uniq, inv = np.unique(verts, axis=0, return_inverse=True)
    tris = inv.reshape(-1)[tris]
    distinct = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
    tris = tris[distinct]
    v = uniq[tris]
    area2 = np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    tris = tris[area2 > 0]
    used, remap = np.unique(tris, return_inverse=True)
    # the table winds triangles clockwise seen from the negative side
    return TriangleMesh(uniq[used], remap.reshape(-1, 3)[:, ::-1])


def sample_mesh_points(mesh: TriangleMesh, n: int, seed: int) -> np.ndarray:
    """``n`` points, area-weighted over triangles, uniform within each triangle."""
    if mesh.is_empty:
        raise MeshError("cannot sample an empty mesh")
    if n == 0:
        return np.zeros((0, 3))
    rng = np.random.default_rng(seed)
    areas = mesh.areas()
    cdf = np.cumsum(areas)
    tri = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    tri = np.minimum(tri, len(areas) - 1)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    v = mesh.vertices[mesh.triangles[tri]]
    return ((1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1] + (r1 * r2)[:, None] * v[:, 2])


@dataclass
class MetricsReport:
    accuracy: float
    completeness: float
    f1: float
    threshold: float
    n_samples: int

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "completeness": self.completeness, "f1": self.f1,
                "threshold": self.threshold, "n_samples": self.n_samples}


def f1_score(accuracy: float, completeness: float) -> float:
    """Harmonic mean of two percentages (0 when both are 0)."""
    if accuracy + completeness == 0:
        return 0.0
    return 2.0 * accuracy * completeness / (accuracy + completeness)


def fraction_within(src: np.ndarray, dst: np.ndarray, threshold: float) -> float:
    """Percentage of ``src`` points with a ``dst`` point closer than ``threshold``."""
    if len(src) == 0:
        return 0.0
    if len(dst) == 0:
        return 0.0
    d, _ = cKDTree(dst).query(src, k=1, distance_upper_bound=threshold)
    return 100.0 * float(np.mean(d < threshold))


def point_metrics(pred_pts: np.ndarray, gt_pts: np.ndarray, threshold: float) -> MetricsReport:
    acc = fraction_within(pred_pts, gt_pts, threshold)
    comp = fraction_within(gt_pts, pred_pts, threshold)
    return MetricsReport(acc, comp, f1_score(acc, comp), threshold, len(pred_pts))


def reconstruction_metrics(pred: TriangleMesh, gt: TriangleMesh, threshold: float = 0.025,
                           n: int = 100_000, seed: int = 0) -> MetricsReport:
    if pred.is_empty or gt.is_empty:
        raise MeshError("metrics need two non-empty meshes")
    # one seed for both meshes, so identical meshes yield identical samples
    pred_pts = sample_mesh_points(pred, n, seed)
    gt_pts = sample_mesh_points(gt, n, seed)
    return point_metrics(pred_pts, gt_pts, threshold)
