"""Periodic grid geometry and the indexing of finite cell configurations."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from math import comb

import numpy as np


@dataclass(frozen=True)
class GridGeometry:
    """Uniform periodic discretization of the torus [0, L)^dim.

    Cells are numbered in C order of their multi-index, so in 2-d the
    cell (i, j) has index i * M + j.
    """

    dim: int
    cells_per_side: int
    side_length: float

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if self.cells_per_side < 2:
            raise ValueError("cells_per_side must be >= 2")
        if not self.side_length > 0:
            raise ValueError("side_length must be positive")

    @property
    def n_cells(self) -> int:
        return self.cells_per_side ** self.dim

    @property
    def cell_width(self) -> float:
        return self.side_length / self.cells_per_side

    @property
    def cell_volume(self) -> float:
        return self.cell_width ** self.dim

    @property
    def volume(self) -> float:
        return self.side_length ** self.dim

    def multi_index(self, cells) -> np.ndarray:
        """Integer coordinates, shape (..., dim)."""
        cells = np.asarray(cells)
        return np.stack(np.unravel_index(cells, (self.cells_per_side,) * self.dim), axis=-1)

    def flat_index(self, mi) -> np.ndarray:
        mi = np.asarray(mi) % self.cells_per_side
        return np.ravel_multi_index(tuple(np.moveaxis(mi, -1, 0)), (self.cells_per_side,) * self.dim)

    def centers(self) -> np.ndarray:
        """Cell centres, shape (n_cells, dim)."""
        return (self.multi_index(np.arange(self.n_cells)) + 0.5) * self.cell_width

    def min_image(self, off) -> np.ndarray:
        """Map integer offsets to the symmetric range around zero."""
        M = self.cells_per_side
        off = np.asarray(off) % M
        return np.where(off > M // 2, off - M, off)

    @cached_property
    def offset_table(self) -> np.ndarray:
        """offset_table[x, y] = flat index of the periodic displacement x - y."""
        mi = self.multi_index(np.arange(self.n_cells))
        diff = (mi[:, None, :] - mi[None, :, :]) % self.cells_per_side
        return self.flat_index(diff)

    def offset_lengths(self) -> np.ndarray:
        """Euclidean length of each displacement (flat-indexed), minimal image."""
        mi = self.min_image(self.multi_index(np.arange(self.n_cells)))
        return np.sqrt(((mi * self.cell_width) ** 2).sum(axis=-1))

    def to_dict(self):
        return {"dim": self.dim, "cells_per_side": self.cells_per_side, "side_length": self.side_length}


class ConfigSpace:
    """All configurations of at most ``n_max`` distinct cells out of ``n_cells``.

    Configurations are sorted tuples.  The global index runs through level 0,
    level 1, ... and inside a level follows lexicographic order, which is
    also the fixed reduction order used everywhere.
    """

    MAX_SIZE = 5_000_000

    def __init__(self, n_cells: int, n_max: int):
        if n_max < 0:
            raise ValueError("n_max must be >= 0")
        self.n_cells = int(n_cells)
        self.n_max = int(n_max)
        total = sum(comb(self.n_cells, n) for n in range(n_max + 1))
        if total > self.MAX_SIZE:
            raise ValueError(f"configuration space too large ({total} entries)")
        self.levels: list[np.ndarray] = []
        self.offsets = np.zeros(n_max + 2, dtype=np.int64)
        for n in range(n_max + 1):
            if n == 0:
                arr = np.zeros((1, 0), dtype=np.int64)
            else:
                arr = np.fromiter(
                    itertools.chain.from_iterable(itertools.combinations(range(self.n_cells), n)),
                    dtype=np.int64,
                ).reshape(-1, n)
            self.levels.append(arr)
            self.offsets[n + 1] = self.offsets[n] + len(arr)
        self.size = int(self.offsets[-1])
        # binomial table for colex ranks
        self._binom = np.array(
            [[comb(c, i) for i in range(n_max + 2)] for c in range(self.n_cells + 1)], dtype=np.int64
        )
        self._colex_to_pos = []
        for n, arr in enumerate(self.levels):
            r = self._colex(arr)
            inv = np.empty(len(arr), dtype=np.int64)
            inv[r] = np.arange(len(arr))
            self._colex_to_pos.append(inv)
        self.level_of = np.repeat(np.arange(n_max + 1), np.diff(self.offsets))

    def _colex(self, rows: np.ndarray) -> np.ndarray:
        n = rows.shape[1]
        if n == 0:
            return np.zeros(len(rows), dtype=np.int64)
        return self._binom[rows, np.arange(1, n + 1)].sum(axis=1)

    def index_rows(self, rows: np.ndarray) -> np.ndarray:
        """Global indices of sorted rows of equal length (all distinct cells)."""
        rows = np.asarray(rows, dtype=np.int64)
        n = rows.shape[1]
        if n > self.n_max:
            raise ValueError("level above n_max")
        return self.offsets[n] + self._colex_to_pos[n][self._colex(rows)]

    def index(self, cells) -> int:
        cells = tuple(sorted(cells))
        if len(cells) > self.n_max:
            raise KeyError(cells)
        if len(cells) == 0:
            return 0
        return int(self.index_rows(np.array([cells]))[0])

    def config(self, i: int) -> tuple:
        n = int(self.level_of[i])
        return tuple(int(c) for c in self.levels[n][i - self.offsets[n]])

    def level_slice(self, n: int) -> slice:
        return slice(int(self.offsets[n]), int(self.offsets[n + 1]))

    def weights(self, h_d: float) -> np.ndarray:
        """Lebesgue-Poisson quadrature weight h^{d|eta|} per configuration."""
        return h_d ** self.level_of.astype(float)

    def disjoint_rows(self, n: int, cells) -> np.ndarray:
        """Level-n configurations avoiding every cell in ``cells``, as (rows, idx)."""
        arr = self.levels[n]
        idx = np.arange(self.offsets[n], self.offsets[n + 1])
        if len(cells) and n:
            keep = ~np.isin(arr, np.asarray(cells)).any(axis=1)
            return arr[keep], idx[keep]
        return arr, idx

    def union_index(self, rows: np.ndarray, cells) -> np.ndarray:
        """Indices of rows ∪ cells, for rows disjoint from ``cells``."""
        if len(cells) == 0:
            return self.index_rows(rows) if rows.shape[1] else np.zeros(len(rows), dtype=np.int64)
        extra = np.broadcast_to(np.asarray(cells, dtype=np.int64), (len(rows), len(cells)))
        return self.index_rows(np.sort(np.concatenate([rows, extra], axis=1), axis=1))
