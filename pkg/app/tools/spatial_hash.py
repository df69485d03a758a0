"""
Spatial Hash Tool - Uniform 3D hash grid for fixed-radius neighbour queries
"""

from collections import defaultdict
from itertools import product
from typing import Dict, List, Tuple

import numpy as np

from tools.errors import InvalidParameter

_NEIGHBOUR_OFFSETS = np.array(list(product((-1, 0, 1), repeat=3)), dtype=np.int64)


class SpatialHash:
    """Buckets points into cubic cells keyed by integer coordinates"""

    def __init__(self, points, cell_size: float):
        if not cell_size > 0:
            raise InvalidParameter(f"cell_size must be > 0, got {cell_size}")
        self.cell_size = float(cell_size)
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        self.table: Dict[Tuple[int, int, int], np.ndarray] = {}
        buckets: Dict[Tuple[int, int, int], List[int]] = defaultdict(list)
        for idx, key in enumerate(map(tuple, self._cell_coords(self.points))):
            buckets[key].append(idx)
        for key, members in buckets.items():
            self.table[key] = np.array(members, dtype=np.int64)

    def _cell_coords(self, points: np.ndarray) -> np.ndarray:
        return np.floor(points / self.cell_size).astype(np.int64)

    def __len__(self) -> int:
        return len(self.points)

    def candidates(self, cell: Tuple[int, int, int]) -> np.ndarray:
        """Indices of stored points in the 3x3x3 block of cells around `cell`"""
        found = [self.table[key] for key in map(tuple, np.asarray(cell) + _NEIGHBOUR_OFFSETS) if key in self.table]
        if not found:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(found)

    def has_neighbour(self, queries, radius: float) -> np.ndarray:
        """Boolean mask: query k has a stored point with |q_k - p|^2 <= radius^2

        The radius must not exceed the cell size, so the 27-cell block covers
        every candidate.
        """
        if radius > self.cell_size:
            raise InvalidParameter(f"radius {radius} exceeds cell size {self.cell_size}")
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        hit = np.zeros(len(q), dtype=bool)
        if len(q) == 0 or len(self.points) == 0:
            return hit
        r2 = radius * radius
        groups: Dict[Tuple[int, int, int], List[int]] = defaultdict(list)
        for idx, key in enumerate(map(tuple, self._cell_coords(q))):
            groups[key].append(idx)
        for key, members in groups.items():
            cand = self.candidates(key)
            if len(cand) == 0:
                continue
            members = np.array(members, dtype=np.int64)
            diff = q[members][:, None, :] - self.points[cand][None, :, :]
            d2 = np.sum(diff * diff, axis=2)
            hit[members] = np.any(d2 <= r2, axis=1)
        return hit
