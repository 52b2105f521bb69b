"""Uniform box partitions and the quantisation map onto cell centres.

Cells are half-open ``[l, u)`` except the last cell in each dimension,
which is closed, so every point of the domain lies in exactly one cell.
Cells are flattened row-major (last dimension fastest).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .model import Box


@dataclass(frozen=True, eq=False)
class Grid:
    domain: Box
    cells: tuple[int, ...]

    def __post_init__(self):
        cells = tuple(int(c) for c in np.atleast_1d(self.cells))
        if len(cells) != self.domain.dim:
            raise ValueError(f"{len(cells)} cell counts for a {self.domain.dim}-D domain")
        if any(c < 1 for c in cells):
            raise ValueError("cells_per_dim entries must be >= 1")
        if np.any(self.domain.upper <= self.domain.lower):
            raise ValueError("grid domain is degenerate in some dimension")
        object.__setattr__(self, "cells", cells)

    @property
    def dim(self) -> int:
        return len(self.cells)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cells))

    @cached_property
    def widths(self) -> np.ndarray:
        return (self.domain.upper - self.domain.lower) / np.asarray(self.cells)

    @property
    def delta(self) -> float:
        """Cell diameter in the infinity norm."""
        return float(np.max(self.widths))

    def edges(self, d: int) -> np.ndarray:
        lo, hi = self.domain.lower[d], self.domain.upper[d]
        e = lo + np.arange(self.cells[d] + 1) * self.widths[d]
        e[-1] = hi
        return e

    def centers(self, d: int) -> np.ndarray:
        return self.domain.lower[d] + (np.arange(self.cells[d]) + 0.5) * self.widths[d]

    @cached_property
    def representatives(self) -> np.ndarray:
        axes = [self.centers(d) for d in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        reps = np.stack([m.reshape(-1) for m in mesh], axis=-1)
        reps.setflags(write=False)
        return reps

    def cell_bounds(self, index: int) -> Box:
        multi = np.unravel_index(index, self.cells)
        lo = np.array([self.edges(d)[multi[d]] for d in range(self.dim)])
        hi = np.array([self.edges(d)[multi[d] + 1] for d in range(self.dim)])
        return Box(lo, hi)

    def dim_index(self, values, d: int) -> np.ndarray:
        """Per-dimension cell index; -1 outside ``[lower_d, upper_d]``."""
        v = np.asarray(values, dtype=float)
        idx = np.searchsorted(self.edges(d), v, side="right") - 1
        idx = np.minimum(idx, self.cells[d] - 1)
        inside = (v >= self.domain.lower[d]) & (v <= self.domain.upper[d])
        return np.where(inside, idx, -1)

    def index(self, x) -> np.ndarray:
        """Flat cell index of each point; ``n_cells`` (the absorbing index) outside the domain."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"points have dimension {x.shape[-1]}, grid has {self.dim}")
        per = [self.dim_index(x[..., d], d) for d in range(self.dim)]
        outside = np.zeros(x.shape[:-1], dtype=bool)
        for p in per:
            outside |= p < 0
        flat = np.zeros(x.shape[:-1], dtype=np.int64)
        for d, p in enumerate(per):
            flat = flat * self.cells[d] + np.where(p < 0, 0, p)
        return np.where(outside, self.n_cells, flat)

    def lattice_representative(self, x) -> np.ndarray:
        """Centre of the cell of the grid's lattice extended over all of R^n."""
        x = np.asarray(x, dtype=float)
        k = np.floor((x - self.domain.lower) / self.widths)
        return self.domain.lower + (k + 0.5) * self.widths

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(self.domain.lower.tobytes())
        h.update(self.domain.upper.tobytes())
        h.update(np.asarray(self.cells, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]


def build_grid(domain: Box, cells_per_dim) -> Grid:
    return Grid(domain, tuple(np.atleast_1d(cells_per_dim)))


def quantize(grid: Grid, x) -> tuple[int, np.ndarray]:
    """Cell index and representative of a single point.

    Outside the domain the index is ``grid.n_cells`` (the abstraction's
    absorbing state) and the representative is all-NaN.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    idx = int(grid.index(x[None, :])[0])
    if idx == grid.n_cells:
        return idx, np.full(grid.dim, np.nan)
    return idx, grid.representatives[idx].copy()


def grid_delta(grid: Grid) -> float:
    return grid.delta
