import numpy as np
import pytest
import scipy.sparse as sp

from msinv.errors import InvalidModelError
from msinv.mesh import create_mesh
from msinv.operators import (
    sigma_map, sigma_deriv, nodal_gradient, edge_cell_map,
    assemble_operator, grad_A_u,
)
from conftest import taylor_remainders, assert_quadratic


def test_sigma_map_values():
    assert np.allclose(sigma_map(np.zeros(5)), 1.0)
    assert np.allclose(sigma_map(np.full(3, np.log(0.1))), 0.1)


def test_sigma_map_rejects_nonfinite():
    with pytest.raises(InvalidModelError):
        sigma_map(np.array([0.0, np.nan]))


def test_sigma_deriv_finite_difference(rng):
    m = rng.normal(size=10)
    eps = 1e-7
    for i in range(m.size):
        d = np.zeros_like(m)
        d[i] = eps
        fd = (sigma_map(m + d)[i] - sigma_map(m)[i]) / eps
        assert fd == pytest.approx(sigma_deriv(m)[i], rel=1e-6)


def test_nodal_gradient_single_cell_rows():
    mesh = create_mesh(1, 1, 1, 2.0, 1.0, 1.0)
    G = nodal_gradient(mesh)
    # 4 x-edges come first; each row is (-1/2, +1/2) on its endpoints
    row = G[0].toarray().ravel()
    assert row[0] == -0.5 and row[1] == 0.5
    assert np.count_nonzero(row) == 2


def test_nodal_gradient_annihilates_constants():
    mesh = create_mesh(3, 2, 4, 0.5, 1.0, 2.0)
    G = nodal_gradient(mesh)
    assert np.max(np.abs(G @ np.ones(mesh.n_nodes))) == 0.0


def test_nodal_gradient_of_linear_field():
    mesh = create_mesh(3, 2, 4, 0.5, 1.0, 2.0)
    G = nodal_gradient(mesh)
    x = mesh.node_coords()[:, 0]
    g = G @ x
    nx = mesh.n1 * (mesh.n2 + 1) * (mesh.n3 + 1)
    assert np.allclose(g[:nx], 1.0)
    assert np.allclose(g[nx:], 0.0)


def test_operator_neumann_null_space():
    mesh = create_mesh(3, 3, 3)
    op = assemble_operator(mesh, np.zeros(mesh.n_cells))
    resid = op.unpinned @ np.ones(mesh.n_nodes)
    assert np.max(np.abs(resid)) == 0.0


def test_operator_interior_row_is_seven_point():
    # 3x3x3 cells, unit sigma and spacing: interior row = volume-scaled stencil
    mesh = create_mesh(3, 3, 3)
    op = assemble_operator(mesh, np.zeros(mesh.n_cells))
    A = op.unpinned.tocsr()
    center = mesh.node_index(2, 2, 2)
    row = A[center].toarray().ravel()
    assert row[center] == pytest.approx(6.0)
    for nb in (mesh.node_index(1, 2, 2), mesh.node_index(3, 2, 2),
               mesh.node_index(2, 1, 2), mesh.node_index(2, 3, 2),
               mesh.node_index(2, 2, 1), mesh.node_index(2, 2, 3)):
        assert row[nb] == pytest.approx(-1.0)
    assert np.count_nonzero(row) == 7


def test_operator_seven_point_hand_assembled_oracle():
    # independently assemble the sigma=1 stencil over interior nodes
    mesh = create_mesh(3, 3, 3, 0.5, 0.5, 0.5)
    op = assemble_operator(mesh, np.zeros(mesh.n_cells))
    A = op.unpinned.tocsr()
    V = mesh.cell_volume
    for t in [(1, 1, 1), (2, 2, 1), (1, 2, 2)]:
        i, j, k = t
        row = A[mesh.node_index(i, j, k)].toarray().ravel()
        expect = np.zeros(mesh.n_nodes)
        for ax, h in enumerate((mesh.h1, mesh.h2, mesh.h3)):
            for s in (-1, 1):
                nb = list(t)
                nb[ax] += s
                expect[mesh.node_index(*nb)] -= V / h ** 2
                expect[mesh.node_index(i, j, k)] += V / h ** 2
        assert np.allclose(row, expect, atol=1e-14)


def test_operator_exact_symmetry(rng):
    mesh = create_mesh(3, 4, 2, 0.7, 1.3, 0.4)
    m = rng.normal(size=mesh.n_cells)
    op = assemble_operator(mesh, m)
    d = (op.A - op.A.T).tocoo()
    worst = np.max(np.abs(d.data)) if d.nnz else 0.0
    assert worst == 0.0


def test_operator_scaling_in_constant_sigma():
    mesh = create_mesh(3, 3, 2)
    base = assemble_operator(mesh, np.zeros(mesh.n_cells))
    scaled = assemble_operator(mesh, np.full(mesh.n_cells, np.log(3.0)))
    diff = scaled.A - 3.0 * base.A
    assert np.max(np.abs(diff.data)) < 1e-13


def test_pinned_operator_is_spd():
    mesh = create_mesh(4, 4, 4)
    rng = np.random.default_rng(3)
    op = assemble_operator(mesh, rng.uniform(-1, 1, mesh.n_cells))
    w = np.linalg.eigvalsh(op.A.toarray())
    assert w.min() > 0


def test_grad_A_u_zero_for_constant_field(rng):
    # the gradient of A(m) @ 1 vanishes identically (Neumann null space)
    from msinv.operators import grad_A_u_full

    mesh = create_mesh(3, 3, 3)
    m = rng.normal(size=mesh.n_cells) * 0.3
    Gfull = grad_A_u_full(mesh, m, np.ones(mesh.n_nodes))
    assert Gfull.nnz == 0 or np.max(np.abs(Gfull.data)) < 1e-14


def test_grad_A_u_linearity(rng):
    mesh = create_mesh(3, 2, 2)
    m = rng.normal(size=mesh.n_cells) * 0.2
    u1 = rng.normal(size=mesh.n_nodes - 1)
    u2 = rng.normal(size=mesh.n_nodes - 1)
    G12 = grad_A_u(mesh, m, u1 + u2)
    G1 = grad_A_u(mesh, m, u1)
    G2 = grad_A_u(mesh, m, u2)
    assert np.max(np.abs((G12 - G1 - G2).toarray())) < 1e-12


def test_grad_A_u_taylor(rng):
    mesh = create_mesh(3, 3, 2)
    m = rng.normal(size=mesh.n_cells) * 0.3
    u = rng.normal(size=mesh.n_nodes - 1)
    dm = rng.normal(size=mesh.n_cells)
    G = grad_A_u(mesh, m, u)

    def f(mm):
        return assemble_operator(mesh, mm).A @ u

    r = taylor_remainders(f, G @ dm, m, dm, eps0=1e-2)
    assert_quadratic(r)


def test_grad_A_u_adjoint_identity(rng):
    mesh = create_mesh(3, 3, 3)
    m = rng.normal(size=mesh.n_cells) * 0.4
    u = rng.normal(size=mesh.n_nodes - 1)
    G = grad_A_u(mesh, m, u)
    dm = rng.normal(size=mesh.n_cells)
    w = rng.normal(size=mesh.n_nodes - 1)
    lhs = np.dot(G @ dm, w)
    rhs = np.dot(dm, G.T @ w)
    assert lhs == pytest.approx(rhs, rel=1e-14)


def test_grad_A_u_matches_operator_difference_direction(rng):
    # directional derivative consistency: A(m)u is linear in sigma, so the
    # map is exact in sigma-space; check against the assembled difference
    mesh = create_mesh(2, 2, 2)
    m = rng.normal(size=mesh.n_cells) * 0.1
    u = rng.normal(size=mesh.n_nodes - 1)
    dm = rng.normal(size=mesh.n_cells)
    G = grad_A_u(mesh, m, u)
    eps = 1e-6
    fd = (assemble_operator(mesh, m + eps * dm).A @ u
          - assemble_operator(mesh, m - eps * dm).A @ u) / (2 * eps)
    assert np.allclose(G @ dm, fd, rtol=1e-7, atol=1e-12)


def test_dimension_checks():
    mesh = create_mesh(2, 2, 2)
    with pytest.raises(ValueError):
        assemble_operator(mesh, np.zeros(5))
    with pytest.raises(ValueError):
        grad_A_u(mesh, np.zeros(mesh.n_cells), np.zeros(4))


def test_edge_cell_map_weights_sum():
    # summed over cells, each interior edge collects 4 quarter-volumes
    mesh = create_mesh(3, 3, 3, 0.5, 1.0, 2.0)
    C = edge_cell_map(mesh)
    w = C @ np.ones(mesh.n_cells)
    V = mesh.cell_volume
    assert np.max(w) == pytest.approx(V)
    assert np.min(w) == pytest.approx(V / 4)  # domain-edge edges touch one cell
