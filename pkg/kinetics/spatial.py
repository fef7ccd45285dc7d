"""
Simulation domains and the cell-list search for interacting pairs.
"""
import itertools
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.distance import pdist

logger = logging.getLogger(__name__)

DOMAIN_KINDS = ("free", "torus")


@dataclass(frozen=True)
class Domain:
    """Free space, or the torus [0, side)^d."""
    kind: str = "free"
    side: Optional[float] = None

    def __post_init__(self):
        if self.kind not in DOMAIN_KINDS:
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if self.kind == "torus" and not (self.side and self.side > 0):
            raise ValueError("a torus needs a positive side length")

    @property
    def periodic(self):
        return self.kind == "torus"

    def volume(self, dim):
        if not self.periodic:
            return float("inf")
        return self.side ** dim

    def wrap(self, positions):
        if not self.periodic:
            return positions
        wrapped = np.mod(positions, self.side)
        # mod can round up to exactly side for tiny negative inputs
        wrapped[wrapped >= self.side] = 0.0
        return wrapped

    def displacement(self, a, b):
        """a - b, by minimum image on the torus."""
        diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        if self.periodic:
            diff = diff - self.side * np.round(diff / self.side)
        return diff


class SpatialHash:
    """
    Cell list with cells of side at least ``cell_size``. Every interacting
    pair lies in the same cell or in one of the 3^d - 1 neighbouring cells.
    """

    def __init__(self, cell_size, domain=Domain()):
        if cell_size <= 0:
            raise ValueError("cell size must be positive")
        self.cell_size = float(cell_size)
        self.domain = domain
        self.n_cells = None
        self.coords = None
        self._order = None
        self._sorted_keys = None
        self._span = None
        self._origin = None

    def rebuild(self, positions):
        positions = np.asarray(positions, dtype=float)
        dim = positions.shape[1]
        if self.domain.periodic:
            per_axis = max(1, int(np.floor(self.domain.side / self.cell_size)))
            self.n_cells = np.full(dim, per_axis, dtype=np.int64)
            width = self.domain.side / per_axis
            coords = np.floor(positions / width).astype(np.int64) % per_axis
            self._origin = np.zeros(dim, dtype=np.int64)
            self._span = self.n_cells
        else:
            coords = np.floor(positions / self.cell_size).astype(np.int64)
            low = coords.min(axis=0) if len(coords) else np.zeros(dim, dtype=np.int64)
            high = coords.max(axis=0) if len(coords) else np.zeros(dim, dtype=np.int64)
            # one spare cell on each side so neighbour keys never alias
            self._origin = low - 1
            self._span = high - low + 3
            self.n_cells = high - low + 1
        self.coords = coords
        keys = self._keys(coords)
        self._order = np.argsort(keys, kind="stable")
        self._sorted_keys = keys[self._order]
        return self

    def _keys(self, coords):
        shifted = coords - self._origin
        keys = np.zeros(len(coords), dtype=np.int64)
        for axis in range(coords.shape[1]):
            keys = keys * self._span[axis] + shifted[:, axis]
        return keys

    def occupancy(self):
        """Number of particles per occupied cell key."""
        keys, counts = np.unique(self._sorted_keys, return_counts=True)
        return dict(zip(keys.tolist(), counts.tolist()))

    def candidate_pairs(self):
        """Index pairs (i < j) sharing a cell or neighbouring cells."""
        if self.coords is None:
            raise ValueError("hash has not been built")
        n, dim = self.coords.shape
        if n < 2:
            return np.empty((0, 2), dtype=np.int64)
        chunks = []
        for offset in itertools.product((-1, 0, 1), repeat=dim):
            neighbour = self.coords + np.asarray(offset, dtype=np.int64)
            if self.domain.periodic:
                neighbour = neighbour % self.n_cells
            keys = self._keys(neighbour)
            lo = np.searchsorted(self._sorted_keys, keys, side="left")
            hi = np.searchsorted(self._sorted_keys, keys, side="right")
            counts = hi - lo
            total = int(counts.sum())
            if total == 0:
                continue
            first = np.repeat(np.arange(n), counts)
            starts = np.repeat(lo, counts)
            within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
            second = self._order[starts + within]
            keep = first < second
            chunks.append(np.stack([first[keep], second[keep]], axis=1))
        if not chunks:
            return np.empty((0, 2), dtype=np.int64)
        # small tori map several offsets onto one cell
        return np.unique(np.concatenate(chunks), axis=0)


def detect_pairs(positions, spatial_hash, cutoff):
    """Unordered index pairs with |x_i - x_j| < cutoff, sorted, without duplicates."""
    positions = np.asarray(positions, dtype=float)
    if spatial_hash.cell_size < cutoff * (1 - 1e-12):
        raise ValueError("hash cells are smaller than the interaction range")
    candidates = spatial_hash.candidate_pairs()
    if len(candidates) == 0:
        return candidates
    diff = spatial_hash.domain.displacement(positions[candidates[:, 0]], positions[candidates[:, 1]])
    close = np.einsum("ij,ij->i", diff, diff) < cutoff ** 2
    return candidates[close]


def brute_force_pairs(positions, cutoff, domain=Domain()):
    """All-pairs reference for detect_pairs."""
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    if n < 2:
        return np.empty((0, 2), dtype=np.int64)
    squared = np.zeros(n * (n - 1) // 2)
    for axis in range(positions.shape[1]):
        gap = pdist(positions[:, [axis]], "cityblock")
        if domain.periodic:
            gap = np.minimum(gap, domain.side - gap)
        squared += gap ** 2
    first, second = np.triu_indices(n, k=1)
    close = squared < cutoff ** 2
    return np.stack([first[close], second[close]], axis=1).astype(np.int64)
