"""Synthetic models and survey layouts for the batch harness."""

import numpy as np
import scipy.sparse as sp

from .forward import Survey


def generate_block_model(mesh, blocks, background):
    """Cell-wise log-conductivity: ``background`` overwritten by boxes.

    ``blocks`` is a list of ``((i0, i1, j0, j1, k0, k1), sigma)`` with
    half-open cell index ranges.
    """
    if background <= 0:
        raise ValueError("background conductivity must be positive")
    sigma = np.full(mesh.n_cells, float(background))
    ci, cj, ck = mesh.cell_triple(np.arange(mesh.n_cells))
    for extent, value in blocks:
        i0, i1, j0, j1, k0, k1 = extent
        if not (0 <= i0 < i1 <= mesh.n1 and 0 <= j0 < j1 <= mesh.n2
                and 0 <= k0 < k1 <= mesh.n3):
            raise ValueError(f"block extent {extent} outside mesh {mesh.shape_cells}")
        if value <= 0:
            raise ValueError("block conductivity must be positive")
        inside = ((ci >= i0) & (ci < i1) & (cj >= j0) & (cj < j1)
                  & (ck >= k0) & (ck < k1))
        sigma[inside] = float(value)
    return np.log(sigma)


def generate_salt_model(mesh, background=0.1, body=3.0, depth_factor=2.0):
    """Layered background (conductivity growing with depth) plus one
    high-contrast ellipsoidal body; stands in for a salt-style benchmark."""
    ci, cj, ck = mesh.cell_triple(np.arange(mesh.n_cells))
    depth = (mesh.n3 - 0.5 - ck) / mesh.n3          # 0 at top, ~1 at bottom
    sigma = background * (1.0 + depth_factor * depth)
    cx, cy, cz = mesh.n1 / 2.0, mesh.n2 / 2.0, mesh.n3 / 2.0
    r = (((ci + 0.5 - cx) / (0.3 * mesh.n1)) ** 2
         + ((cj + 0.5 - cy) / (0.3 * mesh.n2)) ** 2
         + ((ck + 0.5 - cz) / (0.25 * mesh.n3)) ** 2)
    sigma[r <= 1.0] = body
    return np.log(sigma)


def _surface_positions(count, n):
    """``count`` node positions spread over the interior of [0, n]."""
    if count < 1:
        raise ValueError("survey counts must be >= 1")
    pos = np.unique(np.round(np.linspace(0, n, count + 2))[1:-1].astype(int))
    return pos


def build_survey(mesh, n_src=(3, 3), n_rec=(8, 8)):
    """Dipole sources and point receivers on regular top-surface subgrids.

    Each source is a unit dipole between x-adjacent nodes of the top plane.
    """
    n = mesh.n_nodes - 1
    k_top = mesh.n3

    sx = _surface_positions(n_src[0], mesh.n1 - 1)
    sy = _surface_positions(n_src[1], mesh.n2)
    rows, cols, vals = [], [], []
    col = 0
    for j in sy:
        for i in sx:
            a = mesh.node_index(i, j, k_top) - 1       # pinned ids
            b = mesh.node_index(i + 1, j, k_top) - 1
            rows.extend([a, b])
            cols.extend([col, col])
            vals.extend([1.0, -1.0])
            col += 1
    Q = sp.csc_matrix((vals, (rows, cols)), shape=(n, col))

    rx = _surface_positions(n_rec[0], mesh.n1)
    ry = _surface_positions(n_rec[1], mesh.n2)
    rec_nodes = [mesh.node_index(i, j, k_top) - 1 for j in ry for i in rx]
    P = sp.csc_matrix(
        (np.ones(len(rec_nodes)), (rec_nodes, np.arange(len(rec_nodes)))),
        shape=(n, len(rec_nodes)),
    )
    return Survey(P=P, Q=Q)


def compute_relative_error(m_est, m_base):
    """Two-norm distance to a baseline model, relative to the baseline norm."""
    m_est = np.asarray(m_est, dtype=float)
    m_base = np.asarray(m_base, dtype=float)
    if m_est.shape != m_base.shape:
        raise ValueError("model lengths differ")
    base = np.linalg.norm(m_base)
    if base == 0:
        raise ValueError("baseline model has zero norm")
    return float(np.linalg.norm(m_est - m_base) / base)
