import numpy as np
import pytest
import scipy.sparse as sp

from msinv.errors import FactorizationError, SolverBreakdown
from msinv.mesh import create_mesh
from msinv.operators import assemble_operator
from msinv.solvers import block_cg, direct_factorize, direct_solve


def random_spd(n, seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(n, n))
    return sp.csc_matrix(M @ M.T + n * np.eye(n))


def test_direct_identity():
    f = direct_factorize(sp.eye(7, format="csc"))
    b = np.arange(7.0)
    assert np.allclose(direct_solve(f, b), b)


def test_direct_residual_random_spd():
    A = random_spd(50, 11)
    rng = np.random.default_rng(12)
    B = rng.normal(size=(50, 4))
    f = direct_factorize(A)
    X = direct_solve(f, B)
    res = np.linalg.norm(A @ X - B) / np.linalg.norm(B)
    assert res <= 1e-10
    assert f.fill_nnz > 0 and f.n == 50


def test_direct_constructed_solution_on_mesh():
    mesh = create_mesh(4, 4, 4)
    op = assemble_operator(mesh, np.zeros(mesh.n_cells))
    x_true = np.ones(op.n)
    b = op.A @ x_true
    f = direct_factorize(op.A)
    x = direct_solve(f, b)
    assert np.linalg.norm(x - x_true) / np.linalg.norm(x_true) <= 1e-10


def test_direct_rejects_singular():
    A = sp.csc_matrix(np.zeros((4, 4)))
    with pytest.raises(FactorizationError):
        direct_factorize(A)


def test_block_cg_identity_one_iteration():
    A = sp.eye(20, format="csr")
    B = np.random.default_rng(0).normal(size=(20, 3))
    res = block_cg(A, B, tol=1e-10, maxit=50)
    assert res.converged
    assert res.iterations == 1
    assert np.allclose(res.X, B)


def test_block_cg_matches_direct():
    A = random_spd(80, 5)
    rng = np.random.default_rng(6)
    B = rng.normal(size=(80, 5))
    ref = direct_solve(direct_factorize(A), B)
    res = block_cg(A, B, tol=1e-6, maxit=100)
    assert res.converged
    err = np.linalg.norm(res.X - ref) / np.linalg.norm(ref)
    assert err <= 1e-5


def test_block_cg_mesh_system():
    mesh = create_mesh(6, 6, 6)
    rng = np.random.default_rng(9)
    op = assemble_operator(mesh, rng.uniform(-1, 1, mesh.n_cells))
    B = rng.normal(size=(op.n, 2))
    ref = direct_solve(direct_factorize(op.A), B)
    res = block_cg(op.A, B, tol=1e-8, maxit=500)
    assert res.converged
    assert np.linalg.norm(res.X - ref) / np.linalg.norm(ref) <= 1e-6


def test_block_cg_contract_arguments():
    A = sp.eye(4, format="csr")
    b = np.ones(4)
    with pytest.raises(ValueError):
        block_cg(A, b, tol=1e-6, maxit=0)
    with pytest.raises(ValueError):
        block_cg(A, b, tol=0.0)


def test_block_cg_maxit_one_reports_unconverged():
    A = random_spd(60, 2)
    rng = np.random.default_rng(3)
    B = rng.normal(size=(60, 2))
    res = block_cg(A, B, tol=1e-12, maxit=1)
    assert not res.converged
    assert res.iterations == 1
    assert res.relres > 1e-12


def test_block_cg_residual_history_monotone_enough():
    A = random_spd(100, 8)
    B = np.random.default_rng(10).normal(size=(100, 3))
    res = block_cg(A, B, tol=1e-9, maxit=200)
    hist = np.asarray(res.history)
    assert np.all(np.isfinite(hist))
    assert hist[-1] <= hist[0]


def test_block_cg_deterministic():
    A = random_spd(40, 4)
    B = np.random.default_rng(1).normal(size=(40, 3))
    r1 = block_cg(A, B, tol=1e-8, maxit=100)
    r2 = block_cg(A, B, tol=1e-8, maxit=100)
    assert np.array_equal(r1.X, r2.X)
    assert r1.iterations == r2.iterations


def test_block_cg_zero_column_converges():
    A = random_spd(30, 7)
    B = np.zeros((30, 2))
    B[:, 1] = np.random.default_rng(2).normal(size=30)
    res = block_cg(A, B, tol=1e-8, maxit=100)
    assert res.converged
    assert np.allclose(res.X[:, 0], 0.0)


def test_block_cg_breakdown_carries_iterate():
    # duplicated right-hand sides make the direction block rank deficient
    A = random_spd(25, 13)
    b = np.random.default_rng(4).normal(size=25)
    B = np.column_stack([b, b])
    try:
        res = block_cg(A, B, tol=1e-14, maxit=50)
        assert res.X.shape == (25, 2)  # deflation may rescue the duplicate
    except SolverBreakdown as exc:
        assert exc.result is not None
        assert exc.result.X.shape == (25, 2)
