"""Imaging grid, parallel-beam geometry and the Siddon system matrix.

Images are flat float64 arrays of length ``J`` in row-major order
(``j = (iz * ny + iy) * nx + ix``); sinograms are flat arrays of length ``N``
ordered ``(plane, angle, bin)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp


class GeometryError(ValueError):
    """Raised for inconsistent grid/geometry definitions."""


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    pixel_size: float = 3.0
    nz: int | None = None
    slice_thickness: float | None = None
    centered: bool = True

    def __post_init__(self):
        # 1x1 is permitted so single-pixel projector checks can be expressed
        if self.nx < 1 or self.ny < 1 or (self.nz is not None and self.nz < 1):
            raise GeometryError(f"grid dimensions must be positive, got {self.shape}")
        if not self.pixel_size > 0:
            raise GeometryError("pixel_size must be > 0")

    @property
    def shape(self) -> tuple[int, ...]:
        """Array shape, slowest axis first: (ny, nx) or (nz, ny, nx)."""
        if self.nz is None:
            return (self.ny, self.nx)
        return (self.nz, self.ny, self.nx)

    @property
    def n_pixels(self) -> int:
        return int(np.prod(self.shape))

    @property
    def is_3d(self) -> bool:
        return self.nz is not None

    def x_edges(self) -> np.ndarray:
        x0 = -0.5 * self.nx * self.pixel_size if self.centered else 0.0
        return x0 + self.pixel_size * np.arange(self.nx + 1)

    def y_edges(self) -> np.ndarray:
        y0 = -0.5 * self.ny * self.pixel_size if self.centered else 0.0
        return y0 + self.pixel_size * np.arange(self.ny + 1)

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """In-plane (x, y) centre coordinates, each shaped (ny, nx)."""
        xe, ye = self.x_edges(), self.y_edges()
        xc = 0.5 * (xe[:-1] + xe[1:])
        yc = 0.5 * (ye[:-1] + ye[1:])
        yy, xx = np.meshgrid(yc, xc, indexing="ij")
        return xx, yy


@dataclass(frozen=True)
class ProjGeometry:
    """Parallel-beam sampling: ``n_angles`` views uniformly over [0, pi)."""

    n_angles: int
    n_bins: int
    bin_size: float
    radial_offset: float = 0.0
    n_planes: int = 1

    def __post_init__(self):
        if self.n_angles < 1 or self.n_bins < 1 or self.n_planes < 1:
            raise GeometryError("n_angles, n_bins and n_planes must be >= 1")
        if not self.bin_size > 0:
            raise GeometryError("bin_size must be > 0")

    @property
    def n_rays(self) -> int:
        return self.n_planes * self.n_angles * self.n_bins

    @property
    def shape(self) -> tuple[int, ...]:
        if self.n_planes == 1:
            return (self.n_angles, self.n_bins)
        return (self.n_planes, self.n_angles, self.n_bins)

    def angles(self) -> np.ndarray:
        return np.pi * np.arange(self.n_angles) / self.n_angles

    def bin_centers(self) -> np.ndarray:
        return self.radial_offset + self.bin_size * (np.arange(self.n_bins) - 0.5 * (self.n_bins - 1))

    @classmethod
    def covering(cls, grid: Grid, n_angles: int | None = None, bin_size: float | None = None) -> "ProjGeometry":
        """Geometry whose radial extent covers the grid diagonal."""
        bin_size = grid.pixel_size if bin_size is None else bin_size
        diag = np.hypot(grid.nx, grid.ny) * grid.pixel_size
        n_bins = int(np.ceil(diag / bin_size))
        if n_angles is None:
            n_angles = max(grid.nx, grid.ny)
        return cls(n_angles=n_angles, n_bins=n_bins, bin_size=bin_size, n_planes=grid.nz or 1)


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """Immutable compressed-row matrix with nonnegative entries."""

    n_rows: int
    n_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        ro = np.ascontiguousarray(self.row_offsets, dtype=np.int64)
        ci = np.ascontiguousarray(self.col_indices, dtype=np.int64)
        va = np.ascontiguousarray(self.values, dtype=np.float64)
        object.__setattr__(self, "row_offsets", ro)
        object.__setattr__(self, "col_indices", ci)
        object.__setattr__(self, "values", va)
        if ro.shape != (self.n_rows + 1,) or ro[0] != 0 or ro[-1] != ci.size or ci.size != va.size:
            raise ValueError("malformed CSR offsets")
        if np.any(np.diff(ro) < 0):
            raise ValueError("row_offsets must be nondecreasing")
        if ci.size and (ci.min() < 0 or ci.max() >= self.n_cols):
            raise ValueError("column index out of range")
        if not np.all(np.isfinite(va)) or np.any(va < 0):
            raise ValueError("sparse values must be finite and >= 0")
        for a in (ro, ci, va):
            a.setflags(write=False)

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @cached_property
    def csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.col_indices, self.row_offsets), shape=self.shape)

    @cached_property
    def csr_t(self) -> sp.csr_matrix:
        return self.csr.T.tocsr()

    @classmethod
    def from_scipy(cls, m) -> "SparseMatrix":
        m = sp.csr_matrix(m, dtype=np.float64)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.shape[0], m.shape[1], m.indptr, m.indices, m.data)

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        idx = np.arange(n)
        return cls(n, n, np.arange(n + 1), idx, np.ones(n))

    def to_dense(self) -> np.ndarray:
        return self.csr.toarray()

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix.from_scipy(self.csr_t)

    def scaled(self, factor: float) -> "SparseMatrix":
        if not factor >= 0:
            raise ValueError("scale factor must be >= 0")
        return SparseMatrix(self.n_rows, self.n_cols, self.row_offsets, self.col_indices, self.values * factor)

    def row_scaled(self, weights: np.ndarray) -> "SparseMatrix":
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (self.n_rows,):
            raise ValueError("need one weight per row")
        per_entry = np.repeat(weights, np.diff(self.row_offsets))
        return SparseMatrix(self.n_rows, self.n_cols, self.row_offsets, self.col_indices, self.values * per_entry)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n_cols,):
            raise ValueError(f"expected vector of length {self.n_cols}, got shape {x.shape}")
        return self.csr @ x

    def rmatvec(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (self.n_rows,):
            raise ValueError(f"expected vector of length {self.n_rows}, got shape {q.shape}")
        return self.csr_t @ q

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.csr.sum(axis=1)).ravel()

    def __eq__(self, other):
        if not isinstance(other, SparseMatrix):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.col_indices, other.col_indices)
            and np.array_equal(self.values, other.values)
        )


def _siddon_row(p0, d, xe, ye, nx, ny, tol):
    """Pixel indices and chord lengths of the line ``p0 + s*d`` through one plane."""
    s_lo, s_hi = -np.inf, np.inf
    crossings = []
    for axis, edges in ((0, xe), (1, ye)):
        if d[axis] == 0.0:
            if not (edges[0] <= p0[axis] < edges[-1]):
                return None
            continue
        s = (edges - p0[axis]) / d[axis]
        s_lo = max(s_lo, min(s[0], s[-1]))
        s_hi = min(s_hi, max(s[0], s[-1]))
        crossings.append(s)
    if not s_hi > s_lo:
        return None
    pts = np.concatenate([[s_lo, s_hi], *crossings])
    pts = np.unique(pts[(pts >= s_lo) & (pts <= s_hi)])
    seg = np.diff(pts)
    keep = seg > tol
    if not np.any(keep):
        return None
    mid = 0.5 * (pts[:-1] + pts[1:])[keep]
    seg = seg[keep]
    ix = np.clip(np.floor((p0[0] + mid * d[0] - xe[0]) / (xe[1] - xe[0])).astype(np.int64), 0, nx - 1)
    iy = np.clip(np.floor((p0[1] + mid * d[1] - ye[0]) / (ye[1] - ye[0])).astype(np.int64), 0, ny - 1)
    cols, inv = np.unique(iy * nx + ix, return_inverse=True)
    lengths = np.zeros(cols.size)
    np.add.at(lengths, inv, seg)
    return cols, lengths


def build_system_matrix(grid: Grid, geom: ProjGeometry, ray_weights: np.ndarray | None = None) -> SparseMatrix:
    """Siddon ray-traced system matrix, one line of response per sinogram bin.

    Entry ``(i, j)`` is the chord length of ray ``i`` through pixel ``j`` in
    grid length units, optionally multiplied by a per-ray weight (attenuation,
    normalisation). In 3D the planes are independent (direct planes only).
    """
    planes = grid.nz or 1
    if geom.n_planes != planes:
        raise GeometryError(f"geometry has {geom.n_planes} planes but grid has {planes}")
    xe, ye = grid.x_edges(), grid.y_edges()
    tol = 1e-12 * grid.pixel_size
    offsets = [0]
    cols_all, vals_all = [], []
    for theta in geom.angles():
        c, s = np.cos(theta), np.sin(theta)
        # snap tiny components so axis-aligned views stay axis-aligned
        d = np.array([-s if abs(s) > 1e-15 else 0.0, c if abs(c) > 1e-15 else 0.0])
        for t in geom.bin_centers():
            hit = _siddon_row(np.array([t * c, t * s]), d, xe, ye, grid.nx, grid.ny, tol)
            if hit is None:
                offsets.append(offsets[-1])
                continue
            cols_all.append(hit[0])
            vals_all.append(hit[1])
            offsets.append(offsets[-1] + hit[0].size)
    if offsets[-1] == 0:
        raise GeometryError("no line of response intersects the image grid")
    cols = np.concatenate(cols_all)
    vals = np.concatenate(vals_all)
    plane = SparseMatrix(geom.n_angles * geom.n_bins, grid.nx * grid.ny, np.array(offsets), cols, vals)
    if planes > 1:
        plane = SparseMatrix.from_scipy(sp.kron(sp.identity(planes, format="csr"), plane.csr, format="csr"))
    if ray_weights is not None:
        plane = plane.row_scaled(ray_weights)
    return plane


def forward_project(P: SparseMatrix, x: np.ndarray) -> np.ndarray:
    return P.matvec(x)


def back_project(P: SparseMatrix, q: np.ndarray) -> np.ndarray:
    return P.rmatvec(q)


def sensitivity(P: SparseMatrix) -> np.ndarray:
    """Column sums of P, i.e. the back-projection of a sinogram of ones."""
    return P.rmatvec(np.ones(P.n_rows))
