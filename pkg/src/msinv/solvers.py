"""Sparse direct factorization and block conjugate gradients.

The direct path wraps SuperLU and is used for the projected systems and for
fine meshes small enough to factorize.  Block CG advances all right-hand
sides at once and is the iterative alternative for the fine system.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import FactorizationError, SolverBreakdown


@dataclass
class Factorization:
    """Handle to a factorized sparse SPD matrix."""

    n: int
    fill_nnz: int
    _lu: object = field(repr=False)

    def solve(self, B):
        B = np.asarray(B, dtype=float)
        return self._lu.solve(B)


def direct_factorize(A):
    """Factorize a sparse SPD matrix; raises :class:`FactorizationError` on failure."""
    A = sp.csc_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise FactorizationError(f"matrix is not square: {A.shape}")
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise FactorizationError(f"sparse factorization failed: {exc}") from exc
    fill = int(lu.L.nnz + lu.U.nnz)
    return Factorization(n=A.shape[0], fill_nnz=fill, _lu=lu)


def direct_solve(factor, B):
    """Solve against a :class:`Factorization`, column-wise for block right-hand sides."""
    return factor.solve(B)


@dataclass
class IterativeResult:
    X: np.ndarray
    iterations: int
    relres: float
    converged: bool
    history: list = field(default_factory=list)


def block_cg(A, B, tol=1e-6, maxit=100):
    """Block conjugate gradients for an SPD operator and a block of right-hand sides.

    Stops once every column satisfies ``||A x - b|| / ||b|| <= tol`` (2-norm,
    columns with zero right-hand side count as converged) or after ``maxit``
    iterations.  Columns that converge early are frozen and the recurrence is
    restarted on the remaining ones.  Deterministic for identical inputs.

    Raises :class:`SolverBreakdown` (carrying the partial result) if the
    direction block loses rank.
    """
    if tol <= 0:
        raise ValueError(f"tolerance must be > 0, got {tol}")
    if maxit < 1:
        raise ValueError(f"maxit must be >= 1, got {maxit}")

    B = np.asarray(B, dtype=float)
    single = B.ndim == 1
    if single:
        B = B[:, None]
    n, ns = B.shape

    X = np.zeros_like(B)
    bnorm = np.linalg.norm(B, axis=0)
    nonzero = bnorm > 0
    relres = np.zeros(ns)
    history = []

    active = np.flatnonzero(nonzero)
    R = B[:, active].copy()
    P = R.copy()
    it = 0
    converged = not active.size

    def finish(flag):
        res = IterativeResult(
            X=X[:, 0] if single else X,
            iterations=it,
            relres=float(relres.max(initial=0.0)),
            converged=flag,
            history=history,
        )
        return res

    while it < maxit and active.size:
        Q = A @ P
        PtQ = P.T @ Q
        try:
            c = np.linalg.cholesky(PtQ)
            alpha = np.linalg.solve(c.T, np.linalg.solve(c, P.T @ R))
        except np.linalg.LinAlgError:
            raise SolverBreakdown(
                f"direction block lost rank at iteration {it}", result=finish(False)
            ) from None
        X[:, active] += P @ alpha
        R = R - Q @ alpha
        it += 1

        relres[active] = np.linalg.norm(R, axis=0) / bnorm[active]
        history.append(float(relres.max(initial=0.0)))
        done = relres[active] <= tol
        if done.any():
            keep = ~done
            active = active[keep]
            if not active.size:
                converged = True
                break
            # Restart the recurrence on the surviving columns.
            R = B[:, active] - A @ X[:, active]
            P = R.copy()
            continue
        beta = np.linalg.solve(c.T, np.linalg.solve(c, -(Q.T @ R)))
        P = R + P @ beta

    if active.size:
        relres[active] = (
            np.linalg.norm(B[:, active] - A @ X[:, active], axis=0) / bnorm[active]
        )
        converged = bool(np.all(relres <= tol))
    return finish(converged)
