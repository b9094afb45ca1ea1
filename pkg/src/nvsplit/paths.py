"""Time grids and reproducible Brownian increments.

Every random word is a deterministic function of
``(master seed, path index, stream, counter)``: a Philox counter-based
generator is keyed by ``(seed, path_index)`` and each stream occupies its own
block of the counter space, so any path can be regenerated on its own, and
in any order, without replaying the others.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from .errors import ConfigError

MASK64 = (1 << 64) - 1

# Stream identifiers.  Brownian component j uses stream j.
ETA_STREAM = 1 << 32
AUX_STREAM = 1 << 33


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k T / N, k = 0..N."""

    T: float
    N: int

    def __post_init__(self):
        if not (self.T > 0 and int(self.N) >= 1):
            raise ConfigError(f"grid needs T > 0 and N >= 1, got T={self.T}, N={self.N}")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "T", float(self.T))

    @property
    def h(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.T / self.N

    def last_before(self, s: float) -> float:
        """Grid point t_k with s in (t_k, t_{k+1}]; 0 at s = 0."""
        if s <= 0.0:
            return 0.0
        k = int(np.ceil(s * self.N / self.T)) - 1
        return max(k, 0) * self.T / self.N

    def first_after(self, s: float) -> float:
        """Grid point t_{k+1} with s in (t_k, t_{k+1}]; 0 at s = 0."""
        if s <= 0.0:
            return 0.0
        k = int(np.ceil(s * self.N / self.T)) - 1
        return (max(k, 0) + 1) * self.T / self.N

    def refined(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.T, self.N * int(factor))


def _ratio_levels(n_fine: int, n_coarse: int) -> int:
    if n_coarse < 1 or n_fine % n_coarse:
        raise ConfigError(f"grid with {n_coarse} steps does not divide the {n_fine}-step grid")
    ratio = n_fine // n_coarse
    if ratio & (ratio - 1):
        raise ConfigError(f"refinement ratio {ratio} between grids must be a power of two")
    return ratio.bit_length() - 1


def _halve(x: np.ndarray) -> np.ndarray:
    return x[..., 0::2] + x[..., 1::2]


@dataclass(frozen=True, eq=False)
class BrownianPath:
    """Increments of a batch of d-dimensional Brownian paths.

    ``increments`` has shape ``(B, d, N)`` for ``B = len(path_indices)``.
    """

    d: int
    grid: TimeGrid
    increments: np.ndarray
    seed: int
    path_indices: np.ndarray

    @property
    def batch(self) -> int:
        return int(self.increments.shape[0])

    def coarsen(self, N: int) -> "BrownianPath":
        """Aggregate increments onto the N-step grid by repeated pairwise sums.

        Summing pairs level by level makes coarsening associative bit for bit:
        coarsening to N and then to N/2 equals coarsening straight to N/2.
        """
        levels = _ratio_levels(self.grid.N, N)
        inc = self.increments
        for _ in range(levels):
            inc = _halve(inc)
        return BrownianPath(self.d, TimeGrid(self.grid.T, N), inc, self.seed, self.path_indices)

    def values(self) -> np.ndarray:
        """W at the grid times, shape ``(B, d, N+1)``, starting at 0."""
        B, d, N = self.increments.shape
        out = np.zeros((B, d, N + 1))
        np.cumsum(self.increments, axis=-1, out=out[..., 1:])
        return out

    def subset(self, rows) -> "BrownianPath":
        return BrownianPath(self.d, self.grid, self.increments[rows], self.seed, self.path_indices[rows])


@dataclass(frozen=True, eq=False)
class RademacherSeq:
    """Signs eta_1..eta_N in {-1, +1} for a batch of paths, shape ``(B, N)``."""

    values: np.ndarray
    seed: int
    path_indices: np.ndarray
    stream: int


def _words(seed: int, path_index: int, stream: int, count: int) -> np.ndarray:
    """The first ``count`` 64-bit words of one (seed, path, stream) substream."""
    bg = np.random.Philox(key=np.array([seed & MASK64, path_index & MASK64], dtype=np.uint64),
                          counter=np.array([0, stream & MASK64, 0, 0], dtype=np.uint64))
    return bg.random_raw(count)


def uniforms(words: np.ndarray) -> np.ndarray:
    """Map 64-bit words to uniforms strictly inside (0, 1) using their top 52 bits.

    With 52 bits the half-offset midpoint is exactly representable, so the
    largest word maps below 1 rather than rounding up to it.
    """
    return ((words >> np.uint64(12)).astype(float) + 0.5) * 2.0 ** -52


def _indices(path_index) -> np.ndarray:
    idx = np.atleast_1d(np.asarray(path_index, dtype=np.int64))
    if idx.ndim != 1 or np.any(idx < 0):
        raise ConfigError("path indices must be non-negative integers")
    return idx


def gaussian_block(seed: int, path_index, streams: Sequence[int], count: int) -> np.ndarray:
    """Standard normals by inverse CDF, shape ``(B, len(streams), count)``."""
    idx = _indices(path_index)
    raw = np.empty((idx.shape[0], len(streams), count), dtype=np.uint64)
    for b, p in enumerate(idx):
        for s, stream in enumerate(streams):
            raw[b, s] = _words(seed, int(p), int(stream), count)
    return ndtri(uniforms(raw))


def make_path(seed: int, path_index, d: int, grid_fine: TimeGrid) -> BrownianPath:
    """Brownian increments on ``grid_fine`` for one path index or an array of them.

    Increment ``(j, k)`` of a path is word ``k`` of stream ``j`` of that path,
    scaled to variance ``h``.
    """
    idx = _indices(path_index)
    if d < 1:
        raise ConfigError(f"driving dimension must be >= 1, got {d}")
    z = gaussian_block(seed, idx, range(d), grid_fine.N)
    return BrownianPath(d, grid_fine, np.sqrt(grid_fine.h) * z, int(seed), idx)


def make_rademacher(seed: int, path_index, N: int, stream: int | None = None) -> RademacherSeq:
    """Fair signs for an N-step grid, drawn from a stream disjoint from every Brownian one."""
    idx = _indices(path_index)
    stream = ETA_STREAM + N if stream is None else stream
    vals = np.empty((idx.shape[0], N), dtype=np.int8)
    for b, p in enumerate(idx):
        top = _words(seed, int(p), stream, N) >> np.uint64(63)
        vals[b] = np.where(top == 0, 1, -1)
    return RademacherSeq(vals, int(seed), idx, stream)


def constant_signs(batch: int, N: int, sign: int = 1) -> RademacherSeq:
    """A deterministic sign sequence, e.g. eta = +1 throughout."""
    return RademacherSeq(np.full((batch, N), sign, dtype=np.int8), 0, np.arange(batch), -1)
