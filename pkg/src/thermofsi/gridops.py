"""Sparse operators on the cell-centred background grid.

Interior cells are numbered flat as i*ny + j.  Velocity ghosts in the wall
ring are zero, so ghost columns are simply dropped from the operators.
"""
import numpy as np
import scipy.sparse as sps
from scipy.spatial import cKDTree

from .geometry import bilinear_stencil


def _offsets():
    return ((0, 0), (1, 0), (0, 1), (1, 1))


def interp_matrix(grid, pts, allowed=None, return_clamped=False):
    """Bilinear interpolation of interior cell values at points.

    Without `allowed`, ghost (wall) cells contribute zero.  With a boolean
    `allowed` mask over interior cells, weights are renormalized onto the
    allowed cells; a point whose stencil holds no allowed cell takes the
    value of the nearest allowed cell centre (counted as clamped)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    K = pts.shape[0]
    cells, w = bilinear_stencil(grid, pts)
    rows, cols, vals = [], [], []
    for s, (di, dj) in enumerate(_offsets()):
        ei = cells[:, 0] + di
        ej = cells[:, 1] + dj
        ii, jj = ei - 1, ej - 1
        ok = (ii >= 0) & (ii < grid.nx) & (jj >= 0) & (jj < grid.ny)
        col = np.where(ok, ii * grid.ny + jj, -1)
        rows.append(np.arange(K))
        cols.append(col)
        vals.append(np.where(ok, w[:, s], 0.0))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    clamped = np.zeros(K, dtype=bool)
    if allowed is not None:
        allowed = np.asarray(allowed, dtype=bool).ravel()
        keep = cols >= 0
        keep[keep] &= allowed[cols[keep]]
        vals = np.where(keep, vals, 0.0)
        tot = np.bincount(rows, weights=vals, minlength=K)
        empty = tot <= 1e-14
        scale = np.where(empty, 0.0, 1.0 / np.where(empty, 1.0, tot))
        vals = vals * scale[rows]
        if np.any(empty):
            idx = np.flatnonzero(allowed)
            if idx.size == 0:
                raise ValueError("no allowed cells for interpolation")
            tree = cKDTree(grid.centers[idx])
            _, near = tree.query(pts[empty])
            rows = np.concatenate([rows, np.flatnonzero(empty)])
            cols = np.concatenate([cols, idx[np.atleast_1d(near)]])
            vals = np.concatenate([vals, np.ones(int(empty.sum()))])
            clamped = empty
    good = (cols >= 0) & (vals != 0.0)
    mat = sps.csr_matrix((vals[good], (rows[good], cols[good])), shape=(K, grid.n_cells))
    mat.sum_duplicates()
    if return_clamped:
        return mat, clamped
    return mat


def _shift(grid, di, dj):
    """Matrix picking the neighbour (i+di, j+dj); zero for ghost neighbours."""
    nx, ny = grid.nx, grid.ny
    I, J = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    I2, J2 = I + di, J + dj
    ok = (I2 >= 0) & (I2 < nx) & (J2 >= 0) & (J2 < ny)
    r = (I * ny + J)[ok]
    c = (I2 * ny + J2)[ok]
    return sps.csr_matrix((np.ones(r.size), (r, c)), shape=(grid.n_cells, grid.n_cells))


def centered_derivatives(grid):
    """Central difference d/dx and d/dy with zero ghosts."""
    h2 = 2.0 * grid.dx
    Dx = (_shift(grid, 1, 0) - _shift(grid, -1, 0)) / h2
    Dy = (_shift(grid, 0, 1) - _shift(grid, 0, -1)) / h2
    return Dx.tocsr(), Dy.tocsr()


def laplacian5(grid):
    """Five-point Laplacian with zero ghosts."""
    eye = sps.identity(grid.n_cells, format="csr")
    L = (_shift(grid, 1, 0) + _shift(grid, -1, 0) + _shift(grid, 0, 1) + _shift(grid, 0, -1) - 4.0 * eye)
    return (L / grid.dx**2).tocsr()


def forward_gradient(grid):
    """Forward differences to the +x and +y neighbours (ghosts zero)."""
    eye = sps.identity(grid.n_cells, format="csr")
    Fx = (_shift(grid, 1, 0) - eye) / grid.dx
    Fy = (_shift(grid, 0, 1) - eye) / grid.dx
    return Fx.tocsr(), Fy.tocsr()


def divergence(grid):
    Dx, Dy = centered_derivatives(grid)
    return sps.hstack([Dx, Dy]).tocsr()


def same_label_faces(grid, labels_flat):
    """Pairs (a, b) of adjacent interior cells sharing a label."""
    nx, ny = grid.nx, grid.ny
    idx = np.arange(grid.n_cells).reshape(nx, ny)
    lab = np.asarray(labels_flat).reshape(nx, ny)
    pairs = []
    for a, b, la, lb in ((idx[:-1, :], idx[1:, :], lab[:-1, :], lab[1:, :]),
                         (idx[:, :-1], idx[:, 1:], lab[:, :-1], lab[:, 1:])):
        same = la == lb
        pairs.append(np.stack([a[same], b[same]], axis=1))
    return np.concatenate(pairs, axis=0)


def face_laplacian(n, faces, weights=None):
    """Graph Laplacian sum_f w_f (x_a - x_b)^2 as a sparse SPD-semidefinite
    matrix (twice the quadratic form's Hessian over 2)."""
    a, b = faces[:, 0], faces[:, 1]
    w = np.ones(len(faces)) if weights is None else np.asarray(weights, dtype=float)
    rows = np.concatenate([a, b, a, b])
    cols = np.concatenate([a, b, b, a])
    vals = np.concatenate([w, w, -w, -w])
    return sps.csr_matrix((vals, (rows, cols)), shape=(n, n))


def velocity_gradient(grid, u, v):
    """Centred gradient tensor per cell, shape (n, 2, 2)."""
    Dx, Dy = centered_derivatives(grid)
    g = np.empty((grid.n_cells, 2, 2))
    g[:, 0, 0] = Dx @ u
    g[:, 0, 1] = Dy @ u
    g[:, 1, 0] = Dx @ v
    g[:, 1, 1] = Dy @ v
    return g
