"""Model-adapted multiscale basis built from independent per-block solves.

A basis column is defined by Dirichlet data on the skeleton (block boundary
nodes) plus a forcing on block interiors; its interior values solve the local
diffusion problem in each block.  Four families of boundary conditions are
provided: trilinear coarse-node hats, restricted sources, traces of reference
fields on the skeleton, and per-block principal components of those traces.

Everything lives in the pinned node space.  The pinned node is always a block
corner and block interiors are never adjacent to corners, so dropping it does
not change any interior solve.  The directional-derivative operators of the
basis and of its transpose are assembled block-locally from cached interior
factorizations.
"""

import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import StaleBasisError
from .operators import assemble_operator, nodal_gradient, edge_cell_map, sigma_deriv
from .parallel import run_indexed

FAMILIES = ("lagrange", "source", "skeleton", "local_pca")

# Per-block interior systems at or below DENSE_BLOCK_LIMIT are factorized
# densely; at or below INVERSE_BLOCK_LIMIT the inverse is materialized so
# repeated solves become matrix products (GIL-free and lock-free).
DENSE_BLOCK_LIMIT = 2000
INVERSE_BLOCK_LIMIT = 512


@dataclass(frozen=True)
class BasisSpec:
    """Which boundary-condition families to build and the local PCA budget."""

    families: tuple = ("lagrange",)
    pca_rank: int = 0
    pca_total: int = 0          # 0 = keep everything above the drop tolerance
    pca_drop_tol: float = 1e-10

    def __post_init__(self):
        unknown = set(self.families) - set(FAMILIES)
        if unknown:
            raise ValueError(f"unknown basis families: {sorted(unknown)}")
        if not self.families:
            raise ValueError("at least one basis family must be enabled")
        if "local_pca" in self.families and self.pca_rank < 1:
            raise ValueError("local_pca requires pca_rank >= 1")


@dataclass
class BoundaryConditionSet:
    """Dirichlet/forcing data defining one family of basis columns.

    ``values`` holds skeleton values and ``forcing`` interior forcing, both
    sparse ``n_pinned x count``.  ``block_restrict`` limits a column to a
    single block (local PCA family); ``None`` means a column is solved in
    every block its data touches.
    """

    family: str
    values: sp.csc_matrix
    forcing: sp.csc_matrix
    block_restrict: np.ndarray = None
    labels: list = field(default_factory=list)
    dropped: list = field(default_factory=list)

    @property
    def count(self):
        return self.values.shape[1]


def _pin(ids):
    """Full-space node ids -> pinned ids, dropping the pinned node if present."""
    ids = np.asarray(ids)
    return ids[ids != 0] - 1


def coarse_hat_values(partition, coarse_node, node_ids):
    """Trilinear hat of a coarse node evaluated at full-space node ids."""
    mesh = partition.mesh
    ci, cj, ck = mesh.node_triple(coarse_node)
    i, j, k = mesh.node_triple(np.asarray(node_ids))
    w = np.ones(np.atleast_1d(i).shape, dtype=float)
    for x, c, b in ((i, ci, partition.b1), (j, cj, partition.b2), (k, ck, partition.b3)):
        w = w * np.maximum(0.0, 1.0 - np.abs(np.asarray(x, dtype=float) - c) / b)
    return w


def generate_bc_lagrange(partition):
    """One column per coarse node: hat values on the skeleton, zero forcing."""
    n = partition.mesh.n_nodes - 1
    skel = partition.skeleton
    skel_p = _pin(skel)
    skel_nz = skel[skel != 0]
    rows, cols, vals = [], [], []
    for c, cn in enumerate(partition.coarse_nodes):
        w = coarse_hat_values(partition, cn, skel_nz)
        nz = np.flatnonzero(w)
        rows.append(skel_p[nz])
        cols.append(np.full(nz.size, c))
        vals.append(w[nz])
    values = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, partition.n_coarse_nodes),
    ).tocsc()
    forcing = sp.csc_matrix((n, partition.n_coarse_nodes))
    return BoundaryConditionSet(
        family="lagrange", values=values, forcing=forcing,
        labels=[("coarse_node", int(cn)) for cn in partition.coarse_nodes],
    )


def generate_bc_source(partition, Q):
    """One column per source: the source restricted to block interiors as
    forcing, zero Dirichlet values.  All-zero restrictions are dropped."""
    n = partition.mesh.n_nodes - 1
    Q = sp.csc_matrix(Q)
    mask = np.zeros(n, dtype=bool)
    for ids in partition.interiors:
        mask[_pin(ids)] = True
    restricted = (sp.diags(mask.astype(float)) @ Q).tocsc()
    restricted.eliminate_zeros()
    counts = np.diff(restricted.indptr)
    keep = np.flatnonzero(counts > 0)
    dropped = np.flatnonzero(counts == 0).tolist()
    forcing = restricted[:, keep] if keep.size else sp.csc_matrix((n, 0))
    values = sp.csc_matrix((n, forcing.shape[1]))
    return BoundaryConditionSet(
        family="source", values=values, forcing=forcing,
        labels=[("source", int(j)) for j in keep], dropped=dropped,
    )


def reference_fields(partition, m_ref, Q, pieces=None):
    """Pinned fine-mesh fields for every source column at the reference model."""
    from .solvers import direct_factorize

    op = assemble_operator(partition.mesh, m_ref, pieces=pieces)
    factor = direct_factorize(op.A)
    Qd = Q.toarray() if sp.issparse(Q) else np.asarray(Q, dtype=float)
    return factor.solve(Qd)


def _as_fields(u_ref):
    u = np.asarray(u_ref, dtype=float)
    return u[:, None] if u.ndim == 1 else u


def generate_bc_skeleton(partition, m_ref=None, Q=None, u_ref=None, pieces=None):
    """One column per reference field: its skeleton trace as Dirichlet data.

    Pass precomputed fields via ``u_ref`` to avoid re-solving; otherwise they
    are computed from ``m_ref`` and ``Q``.
    """
    if u_ref is None:
        u_ref = reference_fields(partition, m_ref, Q, pieces=pieces)
    u_ref = _as_fields(u_ref)
    n = partition.mesh.n_nodes - 1
    mask = np.zeros(n, dtype=bool)
    mask[_pin(partition.skeleton)] = True
    values = sp.csc_matrix(u_ref * mask[:, None])
    forcing = sp.csc_matrix((n, values.shape[1]))
    return BoundaryConditionSet(
        family="skeleton", values=values, forcing=forcing,
        labels=[("skeleton", j) for j in range(values.shape[1])],
    )


def generate_bc_local_pca(partition, m_ref=None, Q=None, rank=1, total=0,
                          drop_tol=1e-10, u_ref=None, pieces=None):
    """Principal components of reference-field traces on each block boundary.

    Traces are centered (mean over fields removed) before the SVD; components
    with singular value below ``drop_tol * s_max`` are dropped.  A positive
    ``total`` keeps only that many components overall, ranked by singular
    value across blocks.
    """
    if u_ref is None:
        u_ref = reference_fields(partition, m_ref, Q, pieces=pieces)
    u_ref = _as_fields(u_ref)
    ns = u_ref.shape[1]
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if rank > ns:
        raise ValueError(f"rank {rank} exceeds number of reference fields {ns}")
    n = partition.mesh.n_nodes - 1
    entries = []   # (block, component, importance, pinned node ids, values)
    for j in range(partition.n_blocks):
        bnd = _pin(partition.boundaries[j])
        T = u_ref[bnd, :]
        mu = T.mean(axis=1)
        U, s, _ = sla.svd(T - mu[:, None], full_matrices=False)
        # Lead with the mean trace so rank-1 data keeps its single direction
        # and the reference traces stay representable; orthonormalize the rest
        # against it.
        mu_norm = float(np.linalg.norm(mu))
        dirs, weights = [], []
        if mu_norm > 0:
            dirs.append(mu / mu_norm)
            weights.append(mu_norm * np.sqrt(ns))
        for r in range(s.size):
            dirs.append(U[:, r])
            weights.append(float(s[r]))
        if not dirs:
            continue
        Qb, R = np.linalg.qr(np.column_stack(dirs))
        smax = max(weights)
        if smax == 0.0:
            continue
        kept = 0
        for r, w in enumerate(weights):
            if kept >= rank or w < drop_tol * smax:
                break
            if abs(R[r, r]) < 1e-10:   # direction already spanned; skip it
                continue
            entries.append((j, kept, w, bnd, Qb[:, r].copy()))
            kept += 1
    if total and len(entries) > total:
        order = np.argsort([-e[2] for e in entries], kind="stable")
        entries = [entries[i] for i in np.sort(order[:total])]
    rows, cols, vals, blocks, labels = [], [], [], [], []
    for c, (j, r, _s, bnd, vec) in enumerate(entries):
        rows.append(bnd)
        cols.append(np.full(bnd.size, c))
        vals.append(vec)
        blocks.append(j)
        labels.append(("local_pca", j, r))
    count = len(entries)
    if count:
        values = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, count),
        ).tocsc()
    else:
        values = sp.csc_matrix((n, 0))
    return BoundaryConditionSet(
        family="local_pca", values=values, forcing=sp.csc_matrix((n, count)),
        block_restrict=np.asarray(blocks, dtype=int), labels=labels,
    )


# LAPACK solve entry points contend on an internal OpenBLAS spinlock when
# called from several threads; funnel them through a sleeping lock instead so
# other workers' GIL-bound work overlaps cleanly.
_LAPACK_LOCK = threading.Lock()

# Solves this wide trigger materializing the block inverse, after which every
# solve is a plain matrix product (GIL-free, runs concurrently from threads).
_INVERSE_TRIGGER_COLS = 128


class _BlockFactor:
    """Factorization of one block's interior operator.

    Small blocks switch to an explicit inverse once a wide solve shows up, so
    repeated derivative applications become matrix products.  Larger blocks
    stay with Cholesky / sparse LU solves.
    """

    def __init__(self, A_II, dense=None):
        self.n = A_II.shape[0] if dense is None else dense.shape[0]
        self._chol = self._lu = self._inv = None
        if self.n == 0:
            return
        if dense is None and self.n <= DENSE_BLOCK_LIMIT:
            dense = A_II.toarray()
        if dense is not None:
            with _LAPACK_LOCK:
                self._chol = sla.cho_factor(dense, lower=True, check_finite=False)
        else:
            with _LAPACK_LOCK:
                self._lu = spla.splu(sp.csc_matrix(A_II))

    def _ensure_inverse(self):
        if self._inv is None:
            with _LAPACK_LOCK:
                if self._inv is None:
                    self._inv = sla.cho_solve(self._chol, np.eye(self.n), check_finite=False)

    def solve(self, B):
        if self.n == 0:
            return np.zeros_like(B)
        if self._inv is not None:
            return self._inv @ B
        if self._chol is not None:
            wide = B.ndim == 2 and B.shape[1] >= _INVERSE_TRIGGER_COLS
            if wide and self.n <= INVERSE_BLOCK_LIMIT:
                self._ensure_inverse()
                return self._inv @ B
            with _LAPACK_LOCK:
                return sla.cho_solve(self._chol, B, check_finite=False)
        return self._lu.solve(B)


@dataclass
class MultiscaleBasis:
    """Assembled sparse basis plus the per-block machinery to differentiate it.

    ``edge_profiles`` holds the nodal gradient of every column; columns of
    block-restricted families are masked to edges incident to their own
    block's interior.  This single matrix drives both directional-derivative
    operators and their adjoints.
    """

    partition: object
    model: np.ndarray
    S: sp.csc_matrix
    families: np.ndarray
    labels: list
    block_factors: list
    interiors_p: list
    edge_profiles: sp.csc_matrix
    edge_owner: np.ndarray
    block_edges: list
    pieces: tuple               # (nodal gradient, edge-cell map) on the full node set
    cache: object = None
    _xk_blocks: list = field(default=None, repr=False)

    @property
    def k(self):
        return self.S.shape[1]

    @property
    def n(self):
        return self.S.shape[0]

    def check_model(self, m):
        if not np.array_equal(self.model, np.asarray(m, dtype=float)):
            raise StaleBasisError(
                "basis was built at a different model; rebuild before applying"
            )

    def interior_solve(self, w, workers=1):
        """Apply blockdiag(A_II^{-1}) on interior nodes, zero on the skeleton."""
        w = np.asarray(w, dtype=float)
        out = np.zeros_like(w)

        def task(j):
            ids = self.interiors_p[j]
            if ids.size == 0:
                return None
            return self.block_factors[j].solve(w[ids])

        for j, sol in enumerate(run_indexed(task, len(self.interiors_p), workers)):
            if sol is not None:
                out[self.interiors_p[j]] = sol
        return out

    def grad_edge(self, v):
        """Masked per-edge gradient profile of the combination ``S @ v``."""
        return self.edge_profiles @ np.asarray(v, dtype=float)

    def xk_blocks(self):
        """Per-block dense edge profiles (built once per basis): list of
        ``(supported columns, dense E_j x |sup| profile slice)`` or ``None``."""
        if self._xk_blocks is None:
            Ep = self.edge_profiles.tocsr()
            out = []
            for edges in self.block_edges:
                if edges.size == 0:
                    out.append(None)
                    continue
                V = Ep[edges].tocsc()
                sup = np.flatnonzero(np.diff(V.indptr))
                if sup.size == 0:
                    out.append(None)
                    continue
                out.append((sup, V[:, sup].toarray()))
            self._xk_blocks = out
        return self._xk_blocks


def _stack_bc(bc_sets):
    """Concatenate bc families in canonical order into one column block."""
    rank = {f: i for i, f in enumerate(FAMILIES)}
    bc_sets = sorted(bc_sets, key=lambda s: rank[s.family])
    counts = [s.count for s in bc_sets]
    k = int(sum(counts))
    if k == 0:
        raise ValueError("no basis columns: all bc sets are empty")
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(int)
    values = sp.hstack([s.values for s in bc_sets], format="csc")
    forcing = sp.hstack([s.forcing for s in bc_sets], format="csc")
    restrict = np.full(k, -1, dtype=int)
    for s, off in zip(bc_sets, offsets):
        if s.block_restrict is not None:
            restrict[off:off + s.count] = s.block_restrict
    families = np.concatenate([np.full(s.count, s.family) for s in bc_sets])
    labels = [lab for s in bc_sets for lab in s.labels]
    return values, forcing, restrict, families, labels


def _submatrix_template(A, rows, cols, col_map):
    """CSR template of ``A[rows][:, cols]`` plus gather positions into
    ``A.data`` (valid across reassemblies: the sparsity is fixed by the mesh)."""
    col_map[:] = -1
    col_map[cols] = np.arange(cols.size)
    out_c, out_p, counts = [], [], np.zeros(rows.size + 1, dtype=np.int64)
    for a, i in enumerate(rows):
        lo, hi = A.indptr[i], A.indptr[i + 1]
        cl = col_map[A.indices[lo:hi]]
        sel = cl >= 0
        counts[a + 1] = int(sel.sum())
        out_c.append(cl[sel])
        out_p.append(np.arange(lo, hi)[sel])
    indices = np.concatenate(out_c) if out_c else np.empty(0, dtype=np.int64)
    pos = np.concatenate(out_p) if out_p else np.empty(0, dtype=np.int64)
    template = sp.csr_matrix(
        (np.zeros(indices.size), indices, np.cumsum(counts)),
        shape=(rows.size, cols.size),
    )
    return template, pos


class BlockSystemCache:
    """Everything reusable across basis reassemblies at new models: the
    stacked boundary-condition block, gather positions for per-block
    interior/coupling submatrices, each block's supported columns with their
    fixed Dirichlet/forcing right-hand sides, and the mesh-level pieces
    (nodal gradient, edge-cell map, edge owners)."""

    def __init__(self, A, partition, bc_sets, pieces=None):
        values, forcing, restrict, families, labels = _stack_bc(bc_sets)
        self.stacked = (values, forcing, restrict)
        self.families = families
        self.labels = labels
        self.s_template = None
        k = values.shape[1]
        values_csr = values.tocsr()
        forcing_csr = forcing.tocsr()
        free = restrict < 0
        col_map = np.empty(A.shape[1], dtype=np.int64)
        self.blocks = []
        for j in range(partition.n_blocks):
            I = _pin(partition.interiors[j])
            B = _pin(partition.boundaries[j])
            entry = {"I": I, "B": B}
            if I.size:
                touched = np.zeros(k, dtype=bool)
                if values_csr.nnz and B.size:
                    touched |= np.diff(values_csr[B].tocsc().indptr) > 0
                if forcing_csr.nnz:
                    touched |= np.diff(forcing_csr[I].tocsc().indptr) > 0
                cols = np.flatnonzero((touched & free) | (restrict == j))
                entry["cols"] = cols
                entry["ii"], entry["ii_pos"] = _submatrix_template(A, I, I, col_map)
                entry["ib"], entry["ib_pos"] = _submatrix_template(A, I, B, col_map)
                if cols.size:
                    entry["rhs0"] = forcing_csr[I][:, cols].toarray() \
                        if forcing_csr.nnz else np.zeros((I.size, cols.size))
                    entry["xb"] = values_csr[B][:, cols].toarray()
            else:
                entry["cols"] = np.empty(0, dtype=int)
            self.blocks.append(entry)

        mesh = partition.mesh
        n = mesh.n_nodes - 1
        G, C = pieces if pieces is not None else (nodal_gradient(mesh),
                                                  edge_cell_map(mesh))
        self.pieces = (G, C)
        node_owner = np.full(n, -1, dtype=int)
        for j, entry in enumerate(self.blocks):
            node_owner[entry["I"]] = j
        owner = np.full(G.shape[0], -1, dtype=int)
        Gc = G.tocoo()
        end_owner = np.where(Gc.col == 0, -1, node_owner[np.maximum(Gc.col - 1, 0)])
        np.maximum.at(owner, Gc.row, end_owner)
        self.edge_owner = owner
        self.block_edges = [np.flatnonzero(owner == j)
                            for j in range(partition.n_blocks)]

        # cells reachable from each block's interior edges, plus a gather
        # template for the matching rows of the edge-cell map
        C_csr = C.tocsr()
        cell_map = np.empty(C.shape[1], dtype=np.int64)
        for j, entry in enumerate(self.blocks):
            edges = self.block_edges[j]
            entry["edges"] = edges
            if edges.size == 0:
                entry["cells"] = np.empty(0, dtype=int)
                continue
            lohi = [C_csr.indices[C_csr.indptr[e]:C_csr.indptr[e + 1]]
                    for e in edges]
            entry["cells"] = np.unique(np.concatenate(lohi))
            entry["cmap"], entry["cmap_pos"] = _submatrix_template(
                C_csr, edges, entry["cells"], cell_map)

    def conductivity_rows(self, csig_data, j):
        """Dense slice of ``C @ diag(sigma')`` on block ``j``'s edges/cells."""
        tpl = self.blocks[j]["cmap"]
        tpl.data = csig_data[self.blocks[j]["cmap_pos"]]
        return tpl.toarray()

    def interior_matrix(self, data, j):
        tpl = self.blocks[j]["ii"]
        tpl.data = data[self.blocks[j]["ii_pos"]]
        return tpl

    def boundary_coupling(self, data, j):
        tpl = self.blocks[j]["ib"]
        tpl.data = data[self.blocks[j]["ib_pos"]]
        return tpl


def assemble_basis(op, partition, bc_sets, workers=1, cache=None):
    """Build the multiscale basis at the operator's model from bc families.

    Columns are ordered family by family (lagrange, source, skeleton,
    local_pca), preserving each family's internal order.  Per-block interior
    solves are independent work items; interior writes are disjoint, so the
    result is bitwise identical for any worker count.  Pass a
    :class:`BlockSystemCache` (via :class:`BasisBuilder`) to skip the pattern
    and right-hand-side setup when reassembling at a new model.
    """
    mesh = partition.mesh
    n = mesh.n_nodes - 1
    A = op.A.tocsr()

    if cache is None:
        cache = BlockSystemCache(A, partition, bc_sets,
                                 pieces=(op.grad, op.cell_map))
    values, forcing, restrict = cache.stacked
    families, labels = cache.families, cache.labels
    k = values.shape[1]
    interiors_p = [cache.blocks[j]["I"] for j in range(partition.n_blocks)]

    data = A.data

    # serial prep: gather each block's dense system and right-hand sides so
    # worker threads only run factorizations and solves
    prep = []
    for j in range(partition.n_blocks):
        entry = cache.blocks[j]
        I = entry["I"]
        if I.size == 0:
            prep.append(None)
            continue
        A_II = cache.interior_matrix(data, j)
        dense = A_II.toarray() if I.size <= DENSE_BLOCK_LIMIT else None
        sparse = A_II.copy() if dense is None else None
        if entry["cols"].size:
            rhs = entry["rhs0"] - cache.boundary_coupling(data, j) @ entry["xb"]
        else:
            rhs = None
        prep.append((dense, sparse, rhs))

    def block_task(j):
        entry = cache.blocks[j]
        if prep[j] is None:
            return _BlockFactor(sp.csc_matrix((0, 0))), entry["cols"], np.zeros((0, 0))
        dense, sparse, rhs = prep[j]
        factor = _BlockFactor(sparse, dense=dense)
        if rhs is None:
            return factor, entry["cols"], np.zeros((entry["I"].size, 0))
        return factor, entry["cols"], factor.solve(rhs)

    results = run_indexed(block_task, partition.n_blocks, workers)

    block_factors = [r[0] for r in results]
    vcoo = values.tocoo()
    vals = [vcoo.data]
    for j, (_f, c, sol) in enumerate(results):
        if c.size == 0:
            continue
        vals.append(np.asarray(sol).ravel())
    flat = np.concatenate(vals)

    # the entry layout is identical for every rebuild, so the sparse
    # structure of S and the scatter permutation are computed once
    if cache.s_template is None:
        rows, cols = [vcoo.row], [vcoo.col]
        for j, (_f, c, _sol) in enumerate(results):
            if c.size == 0:
                continue
            I = interiors_p[j]
            rows.append(np.repeat(I, c.size))
            cols.append(np.tile(c, I.size))
        probe = sp.coo_matrix(
            (np.arange(1, flat.size + 1, dtype=np.float64),
             (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, k),
        ).tocsc()
        if probe.nnz != flat.size:
            raise AssertionError("basis entries are not disjoint")
        cache.s_template = (probe.indices, probe.indptr,
                            probe.data.astype(np.int64) - 1)
    indices, indptr, perm = cache.s_template
    S = sp.csc_matrix((flat[perm], indices, indptr), shape=(n, k))

    G, C = cache.pieces
    Gp = G[:, 1:]
    owner = cache.edge_owner
    block_edges = cache.block_edges

    profiles = (Gp @ S).tocsc()
    if np.any(restrict >= 0):
        prof = profiles.tocoo()
        col_restrict = restrict[prof.col]
        keep = (col_restrict < 0) | (owner[prof.row] == col_restrict)
        profiles = sp.coo_matrix(
            (prof.data[keep], (prof.row[keep], prof.col[keep])), shape=prof.shape
        ).tocsc()

    return MultiscaleBasis(
        partition=partition, model=op.m.copy(), S=S,
        families=families, labels=labels,
        block_factors=block_factors, interiors_p=interiors_p,
        edge_profiles=profiles, edge_owner=owner, block_edges=block_edges,
        pieces=(G, C), cache=cache,
    )


class BasisBuilder:
    """Generates the boundary-condition families once and re-assembles the
    basis at any model (the data itself never depends on the current model)."""

    def __init__(self, partition, spec, Q=None, m_ref=None, workers=1):
        self.partition = partition
        self.spec = spec
        self.pieces = (nodal_gradient(partition.mesh), edge_cell_map(partition.mesh))
        needs_ref = {"skeleton", "local_pca"} & set(spec.families)
        u_ref = None
        if needs_ref:
            if Q is None or m_ref is None:
                raise ValueError("skeleton/local_pca families need Q and m_ref")
            u_ref = reference_fields(partition, m_ref, Q, pieces=self.pieces)
        sets = []
        for fam in FAMILIES:
            if fam not in spec.families:
                continue
            if fam == "lagrange":
                sets.append(generate_bc_lagrange(partition))
            elif fam == "source":
                if Q is None:
                    raise ValueError("source family needs Q")
                sets.append(generate_bc_source(partition, Q))
            elif fam == "skeleton":
                sets.append(generate_bc_skeleton(partition, u_ref=u_ref))
            else:
                sets.append(generate_bc_local_pca(
                    partition, u_ref=u_ref, rank=spec.pca_rank,
                    total=spec.pca_total, drop_tol=spec.pca_drop_tol,
                ))
        self.bc_sets = sets
        self.default_workers = workers
        self._cache = None

    def assemble(self, op, workers=None):
        if self._cache is None:
            self._cache = BlockSystemCache(op.A.tocsr(), self.partition,
                                           self.bc_sets, pieces=self.pieces)
        w = self.default_workers if workers is None else workers
        return assemble_basis(op, self.partition, self.bc_sets, workers=w,
                              cache=self._cache)


def solve_local_block(op, partition, j, dirichlet_b, forcing_i):
    """Interior values of one block's local Dirichlet problem.

    ``dirichlet_b``/``forcing_i`` are dense values on the block's pinned
    boundary and interior node lists (sorted, pinned node removed).
    """
    if not 0 <= j < partition.n_blocks:
        raise ValueError(f"block index {j} out of range [0, {partition.n_blocks})")
    I = _pin(partition.interiors[j])
    B = _pin(partition.boundaries[j])
    dirichlet_b = np.asarray(dirichlet_b, dtype=float)
    forcing_i = np.asarray(forcing_i, dtype=float)
    if dirichlet_b.shape[0] != B.size or forcing_i.shape[0] != I.size:
        raise ValueError("boundary/interior data lengths do not match block node sets")
    if I.size == 0:
        return forcing_i.copy()
    A = op.A.tocsr()
    rhs = forcing_i - A[I][:, B] @ dirichlet_b
    return _BlockFactor(A[I][:, I]).solve(rhs)


def _edge_weight_chain(basis, m):
    """Pinned nodal gradient and ``C @ diag(sigma'(m))`` with the data laid
    out exactly like the cached edge-cell map (pattern is model-independent)."""
    G, C = basis.pieces
    Csig = C.copy()
    Csig.data = C.data * sigma_deriv(m)[C.indices]
    return G[:, 1:], Csig


def apply_Yk(basis, v, m, workers=1):
    """Directional derivative of ``S(m) @ v`` with respect to the model,
    materialized as a sparse ``n_pinned x n_cells`` matrix.

    Rows live on block interiors only (skeleton values are model-independent);
    per-block contributions have disjoint rows.  The per-block solves are the
    parallel section; slicing happens up front so worker threads spend their
    time in GIL-free matrix products.
    """
    basis.check_model(m)
    Gp, Csig = _edge_weight_chain(basis, m)
    gv = basis.grad_edge(v)
    W = (Gp.T @ sp.diags(gv) @ Csig).tocsr()

    blocks = basis.cache.blocks if basis.cache is not None else None
    prep = []
    for j, I in enumerate(basis.interiors_p):
        if I.size == 0:
            prep.append(None)
            continue
        sub = W[I]
        if blocks is not None:
            cells = blocks[j]["cells"]
            Wd = sub[:, cells].toarray()
            nz = np.flatnonzero(Wd.any(axis=0))
            if nz.size == 0:
                prep.append(None)
                continue
            prep.append((cells[nz], Wd[:, nz]))
        else:
            sub = sub.tocsc()
            used = np.flatnonzero(np.diff(sub.indptr))
            if used.size == 0:
                prep.append(None)
                continue
            prep.append((used, sub[:, used].toarray()))

    def task(j):
        if prep[j] is None:
            return None
        used, Wd = prep[j]
        return used, -basis.block_factors[j].solve(Wd)

    rows, cols, vals = [], [], []
    for j, res in enumerate(run_indexed(task, len(basis.interiors_p), workers)):
        if res is None:
            continue
        used, sol = res
        I = basis.interiors_p[j]
        rows.append(np.repeat(I, used.size))
        cols.append(np.tile(used, I.size))
        vals.append(sol.ravel())
    shape = (basis.n, Csig.shape[1])
    if not rows:
        return sp.csr_matrix(shape)
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=shape,
    ).tocsr()


def apply_Xk(basis, w, m, workers=1):
    """Directional derivative of ``S(m)^T @ w`` with respect to the model,
    materialized as a sparse ``k x n_cells`` matrix.

    Uses per-block dense profile slices cached on the basis, so repeated
    applications reduce to scaled matrix products per block.
    """
    basis.check_model(m)
    Gp, Csig = _edge_weight_chain(basis, m)
    z = basis.interior_solve(w, workers=workers)
    a = Gp @ z
    xk = basis.xk_blocks()
    cache = basis.cache

    def task(j):
        if xk[j] is None:
            return None
        edges = basis.block_edges[j]
        aj = a[edges]
        if not np.any(aj):
            return None
        sup, Vd = xk[j]
        if cache is not None:
            Cjd = cache.conductivity_rows(Csig.data, j)
            used = cache.blocks[j]["cells"]
        else:
            Cj = Csig[edges].tocsc()
            used = np.flatnonzero(np.diff(Cj.indptr))
            Cjd = Cj[:, used].toarray()
        contrib = -((Vd * aj[:, None]).T @ Cjd)
        return sup, used, contrib

    rows, cols, vals = [], [], []
    for res in run_indexed(task, len(basis.block_edges), workers):
        if res is None:
            continue
        sup, used, contrib = res
        rows.append(np.repeat(sup, used.size))
        cols.append(np.tile(used, sup.size))
        vals.append(contrib.ravel())
    shape = (basis.k, Csig.shape[1])
    if not rows:
        return sp.csr_matrix(shape)
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=shape,
    ).tocsr()
