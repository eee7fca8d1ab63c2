"""Sparse voxel index: integer (i, j, k) keys mapped to dense row numbers.

Lookups are vectorized through a sorted copy of the packed keys, so batch
queries cost O(n log m) without a Python loop. When the occupied bounding box
is small enough a dense row table is built lazily and used instead.
"""

from __future__ import annotations

import numpy as np

_BITS = 21
_OFFSET = 1 << (_BITS - 1)
_MASK = (1 << _BITS) - 1
_DENSE_LIMIT = 1 << 26  # max cells of the lazily built dense table


def pack(ijk: np.ndarray) -> np.ndarray:
    ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3) + _OFFSET
    if np.any(ijk < 0) or np.any(ijk > _MASK):
        raise ValueError("voxel index out of packable range")
    return (ijk[:, 0] << (2 * _BITS)) | (ijk[:, 1] << _BITS) | ijk[:, 2]


def unpack(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    out = np.stack([(keys >> (2 * _BITS)) & _MASK, (keys >> _BITS) & _MASK, keys & _MASK], axis=1)
    return out - _OFFSET


class SparseGrid:
    def __init__(self):
        self._keys = np.zeros(0, dtype=np.int64)  # key of each row
        self._sorted_keys = np.zeros(0, dtype=np.int64)
        self._sorted_rows = np.zeros(0, dtype=np.int64)
        self._dense = None  # (base, table) or None; rebuilt after inserts

    def __len__(self) -> int:
        return len(self._keys)

    def indices(self) -> np.ndarray:
        """(n, 3) voxel indices in row order."""
        return unpack(self._keys)

    def lookup_keys(self, keys: np.ndarray) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.int64)
        if len(self._sorted_keys) == 0:
            return np.full(keys.shape, -1, dtype=np.int64)
        pos = np.searchsorted(self._sorted_keys, keys)
        pos = np.minimum(pos, len(self._sorted_keys) - 1)
        found = self._sorted_keys[pos] == keys
        return np.where(found, self._sorted_rows[pos], -1)

    def _dense_table(self):
        if self._dense is None and len(self._keys):
            ijk = self.indices()
            base = ijk.min(axis=0) - 1
            dims = ijk.max(axis=0) - base + 2  # one-cell border of -1
            if np.prod(dims) <= _DENSE_LIMIT:
                table = np.full(dims, -1, dtype=np.int64)
                table[tuple((ijk - base).T)] = np.arange(len(ijk))
                self._dense = (base, table)
            else:
                self._dense = (None, None)
        return self._dense

    def lookup(self, ijk: np.ndarray) -> np.ndarray:
        """Row of each index, -1 where absent."""
        ijk = np.asarray(ijk, dtype=np.int64)
        shape = ijk.shape[:-1]
        flat = ijk.reshape(-1, 3)
        dense = self._dense_table()
        if dense is not None and dense[0] is not None:
            base, table = dense
            n = table.shape
            # out-of-box indices clamp onto the empty border
            i = np.clip(flat[:, 0] - base[0], 0, n[0] - 1)
            j = np.clip(flat[:, 1] - base[1], 0, n[1] - 1)
            k = np.clip(flat[:, 2] - base[2], 0, n[2] - 1)
            return table.ravel()[(i * n[1] + j) * n[2] + k].reshape(shape)
        if len(self._keys) == 0:
            return np.full(shape, -1, dtype=np.int64)
        return self.lookup_keys(pack(flat)).reshape(shape)

    def insert(self, ijk: np.ndarray) -> np.ndarray:
        """Rows for the given indices, allocating absent ones (idempotent).

        New rows are assigned in ascending key order, independent of input order.
        """
        keys = pack(ijk)
        rows = self.lookup_keys(keys)
        missing = np.unique(keys[rows < 0])
        if len(missing):
            new_rows = np.arange(len(self._keys), len(self._keys) + len(missing))
            self._keys = np.concatenate([self._keys, missing])
            all_keys = np.concatenate([self._sorted_keys, missing])
            all_rows = np.concatenate([self._sorted_rows, new_rows])
            order = np.argsort(all_keys, kind="stable")
            self._sorted_keys = all_keys[order]
            self._sorted_rows = all_rows[order]
            self._dense = None
            rows = self.lookup_keys(keys)
        return rows

    def copy(self) -> SparseGrid:
        g = SparseGrid()
        g._keys = self._keys.copy()
        g._sorted_keys = self._sorted_keys.copy()
        g._sorted_rows = self._sorted_rows.copy()
        return g


# corner offsets of a lattice cell, bit k of the corner id selects +1 on axis k
CORNERS = np.array([[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)


def trilinear_corners(x: np.ndarray, origin: np.ndarray, voxel_size: float):
    """Cell corners and trilinear weights for points ``x`` (N, 3).

    Returns (indices (N, 8, 3), weights (N, 8)); weights sum to 1.
    """
    g = (np.asarray(x, dtype=np.float64) - origin) / voxel_size
    base = np.floor(g)
    frac = g - base
    idx = base.astype(np.int64)[:, None, :] + CORNERS[None]
    wa = np.stack([1.0 - frac, frac], axis=1)  # (N, 2, 3)
    w = wa[:, CORNERS[:, 0], 0] * wa[:, CORNERS[:, 1], 1] * wa[:, CORNERS[:, 2], 2]
    return idx, w
