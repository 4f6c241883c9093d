"""Parallel-beam projection, image rotation and design-dependent forward operators.

Conventions
-----------
Images are stored row-major: ``values[row * width + col]``. Geometry uses a
physical frame centred on the grid with ``x = col - (w - 1) / 2`` and
``y = (h - 1) / 2 - row`` (y points up), so a positive angle rotates the
object counterclockwise as displayed.

The single-view projector ``T`` uses vertical rays (parallel to the y axis)
and never changes; every angle dependence lives in the rotation ``R(theta)``.
A view at angle ``theta`` is therefore ``T @ R(theta)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Grid",
    "Image",
    "ProjectionBank",
    "ForwardOperatorA",
    "ForwardOperatorB",
    "build_projector",
    "build_rotation",
    "build_rotation_derivative",
    "assemble_forward_A",
    "assemble_forward_B",
    "siddon",
]

# source coordinates closer than this to a pixel centre are snapped onto it, so
# that R(0) and R(90) (square grids) are exact permutations
_SNAP = 1e-9


@dataclass(frozen=True)
class Grid:
    """Square pixel grid with unit pixels."""

    width: int
    height: int
    pixel_size: float = 1.0

    def __post_init__(self):
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValueError("grid dimensions must be integers")
        if self.width < 2 or self.height < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.width}x{self.height}")
        if self.width != self.height:
            raise ValueError("only square grids are supported")
        if self.pixel_size != 1.0:
            raise ValueError("pixel_size is fixed to 1.0")

    @classmethod
    def square(cls, size: int) -> "Grid":
        return cls(int(size), int(size))

    @property
    def n(self) -> int:
        return self.width * self.height

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical (x, y) coordinates of all pixel centres in storage order."""
        rows, cols = np.divmod(np.arange(self.n), self.width)
        x = cols - (self.width - 1) / 2.0
        y = (self.height - 1) / 2.0 - rows
        return x, y


@dataclass(frozen=True)
class Image:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if values.size != self.grid.n:
            raise ValueError(f"image has {values.size} values, grid needs {self.grid.n}")
        if not np.all(np.isfinite(values)):
            raise ValueError("image values must be finite")
        object.__setattr__(self, "values", values)

    def as_array(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)


def siddon(start, end, width: int, height: int):
    """Exact intersection lengths of the segment ``start -> end`` with a pixel grid.

    Coordinates are in pixel-edge units: column ``c`` covers ``[c, c+1]`` along
    the first coordinate and row ``r`` covers ``[r, r+1]`` along the second.
    Returns ``(pixel_indices, lengths)`` with row-major indices. A ray running
    exactly along a grid line is attributed to the pixels on its larger side.
    """
    x0, y0 = map(float, start)
    x1, y1 = map(float, end)
    dx, dy = x1 - x0, y1 - y0
    length = np.hypot(dx, dy)
    if length == 0.0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)

    ts = [0.0, 1.0]
    if dx != 0.0:
        tx = (np.arange(width + 1) - x0) / dx
        ts.extend(tx[(tx > 0.0) & (tx < 1.0)])
    if dy != 0.0:
        ty = (np.arange(height + 1) - y0) / dy
        ts.extend(ty[(ty > 0.0) & (ty < 1.0)])
    ts = np.unique(np.asarray(ts))
    seg = np.diff(ts)
    keep = seg > 1e-14
    tmid = 0.5 * (ts[:-1] + ts[1:])[keep]
    seg = seg[keep] * length
    cols = np.floor(x0 + tmid * dx).astype(np.int64)
    rows = np.floor(y0 + tmid * dy).astype(np.int64)
    inside = (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
    return rows[inside] * width + cols[inside], seg[inside]


def build_projector(grid: Grid, n_rays: int) -> sp.csr_matrix:
    """Single-view projector ``T`` (``n_rays x n``) for vertical parallel rays.

    Rays are equispaced across the detector, which spans the grid width; with
    ``n_rays == width`` there is one ray through the centre of each column.
    Entry ``(r, j)`` is the length of ray ``r`` inside pixel ``j``.
    """
    if int(n_rays) != n_rays or n_rays <= 0:
        raise ValueError(f"n_rays must be a positive integer, got {n_rays!r}")
    n_rays = int(n_rays)
    spacing = grid.width / n_rays
    rows, cols, vals = [], [], []
    for r in range(n_rays):
        xr = (r + 0.5) * spacing
        idx, lengths = siddon((xr, 0.0), (xr, float(grid.height)), grid.width, grid.height)
        rows.append(np.full(idx.size, r))
        cols.append(idx)
        vals.append(lengths)
    T = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_rays, grid.n),
    )
    T.sum_duplicates()
    return T


def _source_coordinates(grid: Grid, theta_deg: float):
    """Fractional (row, col) positions sampled by each output pixel of R(theta)."""
    x, y = grid.centers()
    t = np.deg2rad(theta_deg)
    c, s = np.cos(t), np.sin(t)
    u = c * x + s * y
    v = -s * x + c * y
    col = u + (grid.width - 1) / 2.0
    row = (grid.height - 1) / 2.0 - v
    for a in (col, row):
        near = np.abs(a - np.round(a)) < _SNAP
        a[near] = np.round(a[near])
    return row, col, u, v


def _bilinear(grid: Grid, row, col):
    """Bilinear stencil: fractional offsets and the four in-bounds neighbours."""
    r0 = np.floor(row).astype(np.int64)
    c0 = np.floor(col).astype(np.int64)
    fr = row - r0
    fc = col - c0
    stencil = []
    for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
        rr, cc = r0 + dr, c0 + dc
        ok = (rr >= 0) & (rr < grid.height) & (cc >= 0) & (cc < grid.width)
        stencil.append((dr, dc, rr, cc, ok))
    return fr, fc, stencil


def build_rotation(grid: Grid, theta_deg: float) -> sp.csr_matrix:
    """``n x n`` operator rotating an image counterclockwise by ``theta_deg``.

    Bilinear interpolation about the grid centre, zero outside the domain.
    Each row holds at most four nonnegative weights summing to at most one.
    """
    theta_deg = float(theta_deg)
    if not np.isfinite(theta_deg):
        raise ValueError("rotation angle must be finite")
    row, col, _, _ = _source_coordinates(grid, theta_deg)
    fr, fc, stencil = _bilinear(grid, row, col)
    out_idx = np.arange(grid.n)
    I, J, V = [], [], []
    for dr, dc, rr, cc, ok in stencil:
        w = (fr if dr else 1.0 - fr) * (fc if dc else 1.0 - fc)
        keep = ok & (w > 0.0)
        I.append(out_idx[keep])
        J.append(rr[keep] * grid.width + cc[keep])
        V.append(w[keep])
    R = sp.csr_matrix(
        (np.concatenate(V), (np.concatenate(I), np.concatenate(J))), shape=(grid.n, grid.n)
    )
    R.sum_duplicates()
    return R


def build_rotation_derivative(
    grid: Grid,
    theta_deg: float,
    mode: str = "analytic",
    h: float = 1e-4,
) -> sp.csr_matrix:
    """Derivative ``dR/dtheta`` (per degree) of :func:`build_rotation`.

    ``mode="analytic"`` differentiates the bilinear weights inside their cells.
    Rows whose sampling point sits within a guard band of a cell boundary,
    where the weights have a kink, fall back to central differences with step
    ``h`` degrees. ``mode="fd"`` uses central differences everywhere and
    ``mode="analytic-raw"`` disables the fallback.
    """
    if mode == "fd":
        return (build_rotation(grid, theta_deg + h) - build_rotation(grid, theta_deg - h)) / (2 * h)
    if mode not in ("analytic", "analytic-raw"):
        raise ValueError(f"unknown derivative mode {mode!r}")

    row, col, u, v = _source_coordinates(grid, theta_deg)
    k = np.pi / 180.0
    dcol = v * k  # d(col)/d(theta)
    drow = u * k  # d(row)/d(theta)
    fr, fc, stencil = _bilinear(grid, row, col)
    out_idx = np.arange(grid.n)
    I, J, V = [], [], []
    for dr, dc, rr, cc, ok in stencil:
        wr = fr if dr else 1.0 - fr
        wc = fc if dc else 1.0 - fc
        dwr = drow if dr else -drow
        dwc = dcol if dc else -dcol
        dw = dwr * wc + wr * dwc
        I.append(out_idx[ok])
        J.append(rr[ok] * grid.width + cc[ok])
        V.append(dw[ok])
    D = sp.csr_matrix(
        (np.concatenate(V), (np.concatenate(I), np.concatenate(J))), shape=(grid.n, grid.n)
    )
    D.sum_duplicates()
    if mode == "analytic-raw":
        return D

    guard = 2.0 * h * np.maximum(np.abs(dcol), np.abs(drow)) + 1e-12
    dist_c = np.abs(col - np.round(col))
    dist_r = np.abs(row - np.round(row))
    kinked = (dist_c < guard) | (dist_r < guard)
    if not kinked.any():
        return D
    fd = build_rotation_derivative(grid, theta_deg, mode="fd", h=h).tolil()
    D = D.tolil()
    for i in np.flatnonzero(kinked):
        D.rows[i] = list(fd.rows[i])
        D.data[i] = list(fd.data[i])
    D = D.tocsr()
    D.eliminate_zeros()
    return D


class ProjectionBank:
    """Lazily built per-angle view operators ``T @ R(theta)`` on a fixed grid."""

    def __init__(self, grid: Grid, n_rays: int | None = None):
        self.grid = grid
        self.n_rays = grid.width if n_rays is None else int(n_rays)
        self.T = build_projector(grid, self.n_rays)
        self._views: dict[float, sp.csr_matrix] = {}

    def view(self, theta_deg: float) -> sp.csr_matrix:
        key = float(theta_deg)
        A = self._views.get(key)
        if A is None:
            A = (self.T @ build_rotation(self.grid, key)).tocsr()
            A.sum_duplicates()
            self._views[key] = A
        return A

    def view_derivative(self, theta_deg: float, mode: str = "analytic") -> sp.csr_matrix:
        return (self.T @ build_rotation_derivative(self.grid, theta_deg, mode=mode)).tocsr()

    def stacked(self, angles) -> sp.csr_matrix:
        return sp.vstack([self.view(a) for a in angles], format="csr")


@dataclass(frozen=True, eq=False)
class ForwardOperatorA:
    """Weighted sparse-angle operator ``M(p) = P (I kron T) [R(theta_1); ...]``.

    Only views in the support ``I(p)`` contribute rows, each scaled by its weight.
    """

    angles: np.ndarray
    weights: np.ndarray
    support: np.ndarray
    blocks: tuple
    n_rays: int
    n: int

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        if self.support.size == 0:
            return sp.csr_matrix((0, self.n))
        return sp.vstack(
            [self.weights[i] * self.blocks[i] for i in self.support], format="csr"
        )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.support.size * self.n_rays, self.n)

    def apply(self, f) -> np.ndarray:
        return self.matrix @ np.asarray(f, dtype=float)

    def adjoint(self, w) -> np.ndarray:
        return self.matrix.T @ np.asarray(w, dtype=float)

    def select(self, d_full) -> np.ndarray:
        """Row-select and scale full-grid data, ``d(p) = P d``."""
        d_full = np.asarray(d_full, dtype=float).reshape(len(self.angles), self.n_rays)
        return (self.weights[self.support, None] * d_full[self.support]).reshape(-1)


@dataclass(frozen=True, eq=False)
class ForwardOperatorB:
    """Stacked views ``(I kron T) R(p)`` for a small set of free angles."""

    angles: np.ndarray
    blocks: tuple
    n_rays: int
    n: int

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        return sp.vstack(list(self.blocks), format="csr")

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.angles) * self.n_rays, self.n)

    def apply(self, f) -> np.ndarray:
        return self.matrix @ np.asarray(f, dtype=float)

    def adjoint(self, w) -> np.ndarray:
        return self.matrix.T @ np.asarray(w, dtype=float)


def assemble_forward_A(
    angles,
    p,
    grid: Grid,
    n_rays: int | None = None,
    threshold: float = 1e-8,
    bank: ProjectionBank | None = None,
) -> ForwardOperatorA:
    """Assemble the Problem-A operator for weights ``p`` on a fixed angle grid.

    The support keeps indices with ``p_i > threshold * max(p)``; an all-zero
    design yields a valid operator with no rows.
    """
    angles = np.asarray(angles, dtype=float).reshape(-1)
    p = np.asarray(p, dtype=float).reshape(-1)
    if p.shape != angles.shape:
        raise ValueError(f"design has {p.size} weights for {angles.size} angles")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("design weights must be finite and nonnegative")
    if bank is None:
        bank = ProjectionBank(grid, n_rays)
    elif bank.grid != grid or (n_rays is not None and bank.n_rays != n_rays):
        raise ValueError("projection bank does not match grid / n_rays")
    pmax = p.max() if p.size else 0.0
    support = np.flatnonzero(p > threshold * pmax) if pmax > 0 else np.zeros(0, dtype=np.int64)
    blocks = tuple(bank.view(a) for a in angles)
    return ForwardOperatorA(
        angles=angles, weights=p.copy(), support=support, blocks=blocks,
        n_rays=bank.n_rays, n=grid.n,
    )


def assemble_forward_B(
    p,
    grid: Grid,
    n_rays: int | None = None,
    bank: ProjectionBank | None = None,
) -> ForwardOperatorB:
    """Assemble the Problem-B operator stacking ``T R(p_k)`` for each angle."""
    p = np.asarray(p, dtype=float).reshape(-1)
    if p.size == 0:
        raise ValueError("at least one angle is required")
    if not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 180):
        raise ValueError(f"angles must lie in [0, 180], got {p}")
    if bank is None:
        bank = ProjectionBank(grid, n_rays)
    blocks = tuple(bank.view(a) for a in p)
    return ForwardOperatorB(angles=p.copy(), blocks=blocks, n_rays=bank.n_rays, n=grid.n)
