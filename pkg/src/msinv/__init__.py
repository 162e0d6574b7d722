"""Multiscale reduced-order inversion of cell-wise log-conductivity."""

from .mesh import TensorMesh, CoarsePartition, create_mesh, create_partition, block_node_sets
from .operators import (
    sigma_map, sigma_deriv, nodal_gradient, edge_cell_map,
    assemble_operator, DiffusionOperator, grad_A_u, grad_A_u_full,
)
from .solvers import Factorization, IterativeResult, direct_factorize, direct_solve, block_cg
from .basis import (
    BasisSpec, BoundaryConditionSet, MultiscaleBasis, BasisBuilder,
    generate_bc_lagrange, generate_bc_source, generate_bc_skeleton,
    generate_bc_local_pca, assemble_basis, solve_local_block,
    apply_Yk, apply_Xk, reference_fields,
)
from .errors import (
    InvalidModelError, FactorizationError, SolverBreakdown,
    StaleBasisError, ReducedSingularError,
)

__version__ = "0.1.0"
