"""Uniform 3D tensor mesh and its nested coarse partition.

Nodes and cells are numbered lexicographically with x fastest, then y,
then z.  All sparse operators in the package rely on this ordering.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class TensorMesh:
    """Uniform tensor mesh with ``n1*n2*n3`` cells and ``(n1+1)(n2+1)(n3+1)`` nodes."""

    n1: int
    n2: int
    n3: int
    h1: float = 1.0
    h2: float = 1.0
    h3: float = 1.0

    def __post_init__(self):
        for n in (self.n1, self.n2, self.n3):
            if int(n) != n or n < 1:
                raise ValueError(f"cell counts must be integers >= 1, got {n}")
        for h in (self.h1, self.h2, self.h3):
            if not (h > 0):
                raise ValueError(f"cell widths must be > 0, got {h}")

    @property
    def shape_cells(self):
        return (self.n1, self.n2, self.n3)

    @property
    def shape_nodes(self):
        return (self.n1 + 1, self.n2 + 1, self.n3 + 1)

    @property
    def n_cells(self):
        return self.n1 * self.n2 * self.n3

    @property
    def n_nodes(self):
        return (self.n1 + 1) * (self.n2 + 1) * (self.n3 + 1)

    @property
    def cell_volume(self):
        return self.h1 * self.h2 * self.h3

    def node_index(self, i, j, k):
        """Linear node index of triple ``(i, j, k)``; accepts arrays."""
        i = np.asarray(i)
        return i + (self.n1 + 1) * (np.asarray(j) + (self.n2 + 1) * np.asarray(k))

    def node_triple(self, idx):
        idx = np.asarray(idx)
        i = idx % (self.n1 + 1)
        rest = idx // (self.n1 + 1)
        return i, rest % (self.n2 + 1), rest // (self.n2 + 1)

    def cell_index(self, i, j, k):
        i = np.asarray(i)
        return i + self.n1 * (np.asarray(j) + self.n2 * np.asarray(k))

    def cell_triple(self, idx):
        idx = np.asarray(idx)
        i = idx % self.n1
        rest = idx // self.n1
        return i, rest % self.n2, rest // self.n2

    def node_coords(self):
        """Coordinates of all nodes, shape ``(n_nodes, 3)``, in linear order."""
        i, j, k = self.node_triple(np.arange(self.n_nodes))
        return np.column_stack([i * self.h1, j * self.h2, k * self.h3])


def create_mesh(n1, n2, n3, h1=1.0, h2=1.0, h3=1.0):
    """Build a :class:`TensorMesh`; rejects non-positive counts or widths."""
    return TensorMesh(n1, n2, n3, h1, h2, h3)


@dataclass(frozen=True)
class CoarsePartition:
    """Nested partition of a mesh into blocks of ``b1 x b2 x b3`` fine cells.

    Node sets are stored as sorted arrays of linear fine-node indices.

    * ``interiors[j]`` -- nodes strictly inside block ``j`` (disjoint across blocks)
    * ``boundaries[j]`` -- the remaining nodes of block ``j``
    * ``skeleton`` -- union of all block boundaries
    * ``coarse_nodes`` -- block corner nodes (the coarse node grid)
    """

    mesh: TensorMesh
    b1: int
    b2: int
    b3: int
    interiors: tuple = field(repr=False)
    boundaries: tuple = field(repr=False)
    skeleton: np.ndarray = field(repr=False)
    coarse_nodes: np.ndarray = field(repr=False)

    @property
    def nb(self):
        """Blocks per axis."""
        m = self.mesh
        return (m.n1 // self.b1, m.n2 // self.b2, m.n3 // self.b3)

    @property
    def n_blocks(self):
        nb1, nb2, nb3 = self.nb
        return nb1 * nb2 * nb3

    @property
    def n_coarse_nodes(self):
        nb1, nb2, nb3 = self.nb
        return (nb1 + 1) * (nb2 + 1) * (nb3 + 1)

    def block_index(self, bi, bj, bk):
        nb1, nb2, _ = self.nb
        return bi + nb1 * (bj + nb2 * bk)

    def block_triple(self, j):
        nb1, nb2, _ = self.nb
        return j % nb1, (j // nb1) % nb2, j // (nb1 * nb2)

    def block_cells(self, j):
        """Linear cell indices covered by block ``j``."""
        m = self.mesh
        bi, bj, bk = self.block_triple(j)
        i = np.arange(bi * self.b1, (bi + 1) * self.b1)
        jj = np.arange(bj * self.b2, (bj + 1) * self.b2)
        kk = np.arange(bk * self.b3, (bk + 1) * self.b3)
        I, J, K = np.meshgrid(i, jj, kk, indexing="ij")
        return np.sort(m.cell_index(I.ravel(), J.ravel(), K.ravel()))

    def block_nodes(self, j):
        """All nodes of block ``j`` (interior plus boundary), sorted."""
        return np.sort(np.concatenate([self.interiors[j], self.boundaries[j]]))


def create_partition(mesh, b1, b2, b3):
    """Partition ``mesh`` into blocks of ``b1 x b2 x b3`` cells (must tile exactly)."""
    for n, b, ax in ((mesh.n1, b1, "x"), (mesh.n2, b2, "y"), (mesh.n3, b3, "z")):
        if int(b) != b or b < 1:
            raise ValueError(f"block size along {ax} must be an integer >= 1, got {b}")
        if n % b != 0:
            raise ValueError(
                f"block size {b} does not divide cell count {n} along {ax}; "
                "partial blocks are not supported"
            )

    i, j, k = mesh.node_triple(np.arange(mesh.n_nodes))
    on_plane = (i % b1 == 0) | (j % b2 == 0) | (k % b3 == 0)
    skeleton = np.flatnonzero(on_plane)
    coarse_nodes = np.flatnonzero((i % b1 == 0) & (j % b2 == 0) & (k % b3 == 0))

    nb1, nb2, nb3 = mesh.n1 // b1, mesh.n2 // b2, mesh.n3 // b3
    interiors = []
    boundaries = []
    for bk in range(nb3):
        for bj in range(nb2):
            for bi in range(nb1):
                ii = np.arange(bi * b1, bi * b1 + b1 + 1)
                jj = np.arange(bj * b2, bj * b2 + b2 + 1)
                kk = np.arange(bk * b3, bk * b3 + b3 + 1)
                I, J, K = np.meshgrid(ii, jj, kk, indexing="ij")
                inner = (
                    (I > bi * b1) & (I < (bi + 1) * b1)
                    & (J > bj * b2) & (J < (bj + 1) * b2)
                    & (K > bk * b3) & (K < (bk + 1) * b3)
                )
                ids = mesh.node_index(I.ravel(), J.ravel(), K.ravel())
                interiors.append(np.sort(ids[inner.ravel()]))
                boundaries.append(np.sort(ids[~inner.ravel()]))

    return CoarsePartition(
        mesh=mesh, b1=b1, b2=b2, b3=b3,
        interiors=tuple(interiors), boundaries=tuple(boundaries),
        skeleton=skeleton, coarse_nodes=coarse_nodes,
    )


def block_node_sets(partition, j):
    """Interior and boundary node index lists of block ``j`` (sorted copies)."""
    if not 0 <= j < partition.n_blocks:
        raise ValueError(f"block index {j} out of range [0, {partition.n_blocks})")
    return partition.interiors[j].copy(), partition.boundaries[j].copy()
