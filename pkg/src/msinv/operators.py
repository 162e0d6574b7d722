"""Discrete diffusion operator on the nodal grid and its model derivative.

The operator is assembled as ``A(m) = G^T diag(w(m)) G`` where ``G`` is the
node-to-edge difference map (entries +-1/h along each axis) and the weight of
an edge is the arithmetic mean of ``sigma = exp(m)`` over the fine cells
touching that edge, times the edge's dual volume.  Both factors together give
each adjacent cell a contribution of ``cell_volume / 4``, so the weight map is
a fixed sparse matrix ``C`` applied to sigma.  With unit sigma the interior
rows reproduce the volume-scaled 7-point stencil.

Pure Neumann boundary conditions leave a constant null space; the operator is
made definite by eliminating the row/column of one pinned node (global node 0).
"""

import numpy as np
import scipy.sparse as sp

from .errors import InvalidModelError

PINNED_NODE = 0


def sigma_map(m):
    """Cell conductivities ``exp(m)``."""
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise InvalidModelError("model vector contains non-finite entries")
    return np.exp(m)


def sigma_deriv(m):
    """Diagonal of ``d sigma / d m``; equals ``exp(m)`` for the log map."""
    return sigma_map(m)


def _edge_nodes(mesh):
    """Endpoint node indices (from, to) of all edges, x-edges first, then y, z."""
    n1, n2, n3 = mesh.n1, mesh.n2, mesh.n3
    out = []
    for axis, (e1, e2, e3) in enumerate(((n1, n2 + 1, n3 + 1),
                                         (n1 + 1, n2, n3 + 1),
                                         (n1 + 1, n2 + 1, n3))):
        i, j, k = np.meshgrid(np.arange(e1), np.arange(e2), np.arange(e3), indexing="ij")
        i, j, k = i.ravel(order="F"), j.ravel(order="F"), k.ravel(order="F")
        a = mesh.node_index(i, j, k)
        step = [0, 0, 0]
        step[axis] = 1
        b = mesh.node_index(i + step[0], j + step[1], k + step[2])
        out.append((a, b))
    return out


def nodal_gradient(mesh):
    """Edge-by-node difference operator with entries ``+-1/h_axis``.

    Rows are ordered x-edges, y-edges, z-edges, each block lexicographic.
    Annihilates constant nodal fields.
    """
    h = (mesh.h1, mesh.h2, mesh.h3)
    rows, cols, vals = [], [], []
    offset = 0
    for axis, (a, b) in enumerate(_edge_nodes(mesh)):
        ne = a.size
        r = offset + np.arange(ne)
        rows.append(np.concatenate([r, r]))
        cols.append(np.concatenate([a, b]))
        inv = 1.0 / h[axis]
        vals.append(np.concatenate([np.full(ne, -inv), np.full(ne, inv)]))
        offset += ne
    G = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(offset, mesh.n_nodes),
    )
    return G.tocsr()


def edge_cell_map(mesh):
    """Sparse edge-by-cell matrix ``C`` with ``C[e, c] = V/4`` for each cell
    ``c`` touching edge ``e``; the edge weights are ``w = C @ sigma``."""
    n1, n2, n3 = mesh.n1, mesh.n2, mesh.n3
    quarter = 0.25 * mesh.cell_volume
    rows, cols = [], []
    offset = 0
    # For an edge along `axis` starting at node (i, j, k), the touching cells
    # are offset by -1/0 along the two transverse axes.
    for axis, (e1, e2, e3) in enumerate(((n1, n2 + 1, n3 + 1),
                                         (n1 + 1, n2, n3 + 1),
                                         (n1 + 1, n2 + 1, n3))):
        i, j, k = np.meshgrid(np.arange(e1), np.arange(e2), np.arange(e3), indexing="ij")
        i, j, k = i.ravel(order="F"), j.ravel(order="F"), k.ravel(order="F")
        ne = i.size
        r = offset + np.arange(ne)
        t1, t2 = [ax for ax in range(3) if ax != axis]
        trip = [i, j, k]
        nmax = (n1, n2, n3)
        for d1 in (-1, 0):
            for d2 in (-1, 0):
                c = [trip[0].copy(), trip[1].copy(), trip[2].copy()]
                c[t1] = c[t1] + d1
                c[t2] = c[t2] + d2
                ok = (c[t1] >= 0) & (c[t1] < nmax[t1]) & (c[t2] >= 0) & (c[t2] < nmax[t2])
                rows.append(r[ok])
                cols.append(mesh.cell_index(c[0][ok], c[1][ok], c[2][ok]))
        offset += ne
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    C = sp.coo_matrix((np.full(rows.size, quarter), (rows, cols)),
                      shape=(offset, mesh.n_cells))
    return C.tocsr()


class DiffusionOperator:
    """Assembled diffusion operator with one eliminated (pinned) node.

    Attributes
    ----------
    A : csr_matrix
        Pinned symmetric positive definite operator, shape ``(N-1, N-1)``.
    edge_weights : ndarray
        Per-edge conductances ``C @ sigma`` (the cached averaging result).
    """

    def __init__(self, mesh, m, pieces=None):
        m = np.asarray(m, dtype=float)
        if m.shape != (mesh.n_cells,):
            raise ValueError(f"model length {m.size} != number of cells {mesh.n_cells}")
        sigma = sigma_map(m)
        if not np.all(sigma > 0):
            raise InvalidModelError("conductivity must be positive")
        G, C = pieces if pieces is not None else (nodal_gradient(mesh), edge_cell_map(mesh))
        self.mesh = mesh
        self.m = m.copy()
        self.sigma = sigma
        self.grad = G
        self.cell_map = C
        self.edge_weights = C @ sigma
        self.pinned_node = PINNED_NODE
        A_full = (G.T @ sp.diags(self.edge_weights) @ G).tocsr()
        self._A_full = A_full
        keep = np.arange(1, mesh.n_nodes)
        self.A = A_full[keep][:, keep].tocsr()

    @property
    def n(self):
        """Dimension of the pinned operator."""
        return self.mesh.n_nodes - 1

    @property
    def unpinned(self):
        """Full singular operator including the pinned node's row/column."""
        return self._A_full

    def pad(self, u):
        """Insert a zero at the pinned node: pinned vector/block -> full."""
        u = np.asarray(u)
        pad = np.zeros((1,) + u.shape[1:], dtype=u.dtype)
        return np.concatenate([pad, u], axis=0)

    def unpad(self, u_full):
        """Drop the pinned node entry: full vector/block -> pinned."""
        return np.asarray(u_full)[1:]


def assemble_operator(mesh, m, pieces=None):
    """Assemble ``A(m)`` (pinned SPD form, full form available as ``.unpinned``)."""
    return DiffusionOperator(mesh, m, pieces=pieces)


def grad_A_u_full(mesh, m, u_full, pieces=None):
    """Derivative ``d(A(m) u)/dm`` for a fixed full-space nodal field ``u``.

    Returns a sparse ``n_nodes x n_cells`` matrix; column ``c`` is supported
    on nodes whose edge stencil touches cell ``c`` and the support of ``u``.
    """
    u_full = np.asarray(u_full, dtype=float)
    if u_full.shape != (mesh.n_nodes,):
        raise ValueError(f"field length {u_full.size} != number of nodes {mesh.n_nodes}")
    G, C = pieces if pieces is not None else (nodal_gradient(mesh), edge_cell_map(mesh))
    gu = G @ u_full
    return (G.T @ sp.diags(gu) @ C @ sp.diags(sigma_deriv(m))).tocsr()


def grad_A_u(mesh, m, u, pieces=None):
    """Pinned-space version of :func:`grad_A_u_full` (pinned entry of ``u`` is 0).

    Returns a sparse ``(n_nodes - 1) x n_cells`` matrix supporting ``@`` and
    transpose application.
    """
    u = np.asarray(u, dtype=float)
    if u.shape != (mesh.n_nodes - 1,):
        raise ValueError(f"field length {u.size} != pinned dimension {mesh.n_nodes - 1}")
    u_full = np.concatenate([[0.0], u])
    return grad_A_u_full(mesh, m, u_full, pieces=pieces)[1:]
