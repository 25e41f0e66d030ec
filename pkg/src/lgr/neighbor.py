"""Periodic fixed-radius neighbor search with cell lists.

The result is a CSR adjacency (``offsets``, ``indices``): neighbors of
particle ``i`` are ``indices[offsets[i]:offsets[i + 1]]``, sorted ascending.
Pairs are included iff the minimum-image distance is strictly below the
radius; self pairs are never included.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .core import PeriodicBox
from .errors import EmptyInput, RadiusTooLarge


@dataclass(frozen=True)
class NeighborList:
    offsets: np.ndarray
    indices: np.ndarray
    radius: float

    @property
    def n_particles(self) -> int:
        return self.offsets.shape[0] - 1

    @property
    def n_pairs(self) -> int:
        """Number of directed pairs (each unordered pair counted twice)."""
        return int(self.indices.shape[0])

    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    def mean_degree(self) -> float:
        return float(self.n_pairs) / self.n_particles

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.offsets[i]:self.offsets[i + 1]]

    def rows(self) -> np.ndarray:
        """Row id of every entry in ``indices`` (the receiving particle)."""
        return np.repeat(np.arange(self.n_particles, dtype=np.int64), self.degrees())

    def as_pairs(self) -> set:
        return set(zip(self.rows().tolist(), self.indices.tolist()))

    def pair_keys(self) -> np.ndarray:
        """Sorted ``receiver * N + sender`` codes, a compact form of :meth:`as_pairs`."""
        n = len(self.offsets) - 1
        return np.sort(self.rows().astype(np.int64) * n + self.indices)


@dataclass(frozen=True)
class CellGrid:
    dims: np.ndarray
    cell_size: np.ndarray
    cell_of: np.ndarray
    cell_start: np.ndarray
    order: np.ndarray


def average_interparticle_distance(n: int, box: PeriodicBox) -> float:
    if n <= 0:
        raise ValueError("need at least one particle")
    return (box.volume / n) ** (1.0 / 3.0)


def build_cell_grid(positions: np.ndarray, box: PeriodicBox, radius: float,
                    reach: int = 1) -> CellGrid:
    """Bucket particles into cells no smaller than ``radius / reach`` per axis."""
    # slack keeps cell_size >= radius / reach despite rounding in extents / dims
    target = radius / reach * (1.0 + 1e-9)
    dims = np.maximum(np.floor(box.extents / target).astype(np.int64), 1)
    cell_size = box.extents / dims
    ijk = np.floor(positions / cell_size).astype(np.int64)
    ijk = np.mod(ijk, dims)
    cell_of = (ijk[:, 0] * dims[1] + ijk[:, 1]) * dims[2] + ijk[:, 2]
    order = np.argsort(cell_of, kind="stable")
    counts = np.bincount(cell_of, minlength=int(np.prod(dims)))
    cell_start = np.zeros(counts.shape[0] + 1, dtype=np.int64)
    np.cumsum(counts, out=cell_start[1:])
    return CellGrid(dims, cell_size, cell_of, cell_start, order)


@nb.njit(cache=True, inline="always")
def _min_image_r2(pi, pj, L, half_l):
    # inputs are wrapped, so |d| < L and one image shift suffices
    r2 = 0.0
    for k in range(3):
        d = pi[k] - pj[k]
        if d > half_l[k]:
            d -= L[k]
        elif d < -half_l[k]:
            d += L[k]
        r2 += d * d
    return r2


@nb.njit(cache=True, inline="always")
def _wrap1(d, L, half):
    if d > half:
        return d - L
    if d < -half:
        return d + L
    return d


@nb.njit(cache=True)
def _transpose_rows(offsets, unsorted, out):
    """Counting-sort transpose; rows come out ascending.

    The pair relation is symmetric, so the transpose has the same row sets.
    """
    n = offsets.shape[0] - 1
    fill = offsets[:-1].copy()
    for i in range(n):
        for s in range(offsets[i], offsets[i + 1]):
            j = unsorted[s]
            out[fill[j]] = i
            fill[j] += 1


@nb.njit(cache=True)
def _cell_search(pos, L, r2max, dims, reach, cell_of, cell_start, order, offsets, out):
    """Single sweep over the ``(2 reach + 1)^3`` stencil; -1 if ``out`` overflows."""
    n = pos.shape[0]
    half_l = 0.5 * L
    lx, ly, lz = L[0], L[1], L[2]
    hx, hy, hz = half_l[0], half_l[1], half_l[2]
    d0, d1, d2 = dims[0], dims[1], dims[2]
    sx = np.empty(n)
    sy = np.empty(n)
    sz = np.empty(n)
    for s in range(n):
        sx[s] = pos[order[s], 0]
        sy[s] = pos[order[s], 1]
        sz[s] = pos[order[s], 2]
    cap = out.shape[0]
    m = 0
    for i in range(n):
        c = cell_of[i]
        ci = c // (d1 * d2)
        cj = (c // d2) % d1
        ck = c % d2
        xi, yi, zi = pos[i, 0], pos[i, 1], pos[i, 2]
        for a in range(-reach, reach + 1):
            na = (ci + a) % d0
            for b in range(-reach, reach + 1):
                nb_ = (cj + b) % d1
                for cc in range(-reach, reach + 1):
                    cell = (na * d1 + nb_) * d2 + (ck + cc) % d2
                    for s in range(cell_start[cell], cell_start[cell + 1]):
                        dx = _wrap1(xi - sx[s], lx, hx)
                        dy = _wrap1(yi - sy[s], ly, hy)
                        dz = _wrap1(zi - sz[s], lz, hz)
                        if dx * dx + dy * dy + dz * dz < r2max:
                            j = order[s]
                            if j != i:
                                if m >= cap:
                                    return -1
                                out[m] = j
                                m += 1
        offsets[i + 1] = m
    return m


@nb.njit(cache=True)
def _brute_search(pos, L, r2max, offsets, out):
    n = pos.shape[0]
    half_l = 0.5 * L
    cap = out.shape[0]
    m = 0
    for i in range(n):
        for j in range(n):
            if j != i and _min_image_r2(pos[i], pos[j], L, half_l) < r2max:
                if m >= cap:
                    return -1
                out[m] = j
                m += 1
        offsets[i + 1] = m
    return m


def build_neighbor_list(positions, box: PeriodicBox, radius: float) -> NeighborList:
    """All pairs closer than ``radius`` under the minimum-image convention.

    Cells of at least ``radius / 2`` with a 125-cell stencil are used when the
    box holds five such cells per axis, else cells of at least ``radius`` with
    the 27-cell stencil when it holds three; smaller boxes fall back to an
    O(N^2) sweep (the stencil would visit cells twice).
    """
    pos = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
    n = pos.shape[0]
    if n == 0:
        raise EmptyInput("cannot build a neighbor list for zero particles")
    radius = float(radius)
    if radius <= 0:
        raise ValueError("radius must be positive")
    if radius > 0.5 * float(np.min(box.extents)):
        raise RadiusTooLarge(
            f"radius {radius} exceeds half the smallest box extent {np.min(box.extents)}"
        )
    L = box.extents
    r2 = radius * radius
    offsets = np.zeros(n + 1, dtype=np.int64)
    grid = None
    for reach in (2, 1):
        g = build_cell_grid(pos, box, radius, reach)
        if np.all(g.dims >= 2 * reach + 1):
            grid = g
            break
    # expected pair count with generous headroom; grows on overflow
    expected = 4.0 / 3.0 * np.pi * radius**3 * n / box.volume * n
    cap = int(2 * expected) + 16 * n
    while True:
        out = np.empty(cap, dtype=np.int64)
        if grid is not None:
            m = _cell_search(pos, L, r2, grid.dims, reach, grid.cell_of, grid.cell_start,
                             grid.order, offsets, out)
        else:
            m = _brute_search(pos, L, r2, offsets, out)
        if m >= 0:
            if grid is None:
                return NeighborList(offsets, out[:m].copy(), radius)
            indices = np.empty(m, dtype=np.int64)
            _transpose_rows(offsets, out, indices)
            return NeighborList(offsets, indices, radius)
        cap *= 2


def brute_force_pairs(positions, box: PeriodicBox, radius: float) -> set:
    """Reference O(N^2) pair set in plain numpy, for testing."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    L = box.extents
    d = pos[:, None, :] - pos[None, :, :]
    d -= L * np.rint(d / L)
    r2 = np.einsum("ijk,ijk->ij", d, d)
    np.fill_diagonal(r2, np.inf)
    ii, jj = np.nonzero(r2 < radius * radius)
    return set(zip(ii.tolist(), jj.tolist()))


def brute_force_pair_keys(positions, box: PeriodicBox, radius: float,
                          block: int = 256) -> np.ndarray:
    """Same pairs as :func:`brute_force_pairs` as sorted ``i * N + j`` codes.

    Every pair is still tested; rows are processed in blocks to bound memory.
    """
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(pos)
    L = box.extents
    keys = []
    for lo in range(0, n, block):
        d = pos[lo:lo + block, None, :] - pos[None, :, :]
        d -= L * np.rint(d / L)
        r2 = np.einsum("ijk,ijk->ij", d, d)
        rows = np.arange(lo, min(lo + block, n))
        r2[rows - lo, rows] = np.inf
        ii, jj = np.nonzero(r2 < radius * radius)
        keys.append((ii + lo).astype(np.int64) * n + jj)
    return np.sort(np.concatenate(keys)) if keys else np.zeros(0, np.int64)
