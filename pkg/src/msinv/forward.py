"""Full and reduced forward maps with matrix-free sensitivities.

Three sensitivity modes are provided: the full-mesh map, the projected map
with a frozen basis, and the projected map with a model-adapted basis whose
change of basis is differentiated exactly.  All three expose ``apply`` (model
perturbation -> data perturbation) and ``rapply`` (its adjoint); dense
Jacobians are never formed.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import ReducedSingularError
from .operators import sigma_deriv
from .solvers import block_cg, direct_factorize

DENSE_REDUCED_LIMIT = 5000


@dataclass
class Survey:
    """Receivers, sources and (optionally) observed data in the pinned space."""

    P: sp.csc_matrix
    Q: sp.csc_matrix
    D_obs: np.ndarray = None
    noise_level: float = 0.0

    def __post_init__(self):
        self.P = sp.csc_matrix(self.P)
        self.Q = sp.csc_matrix(self.Q)
        if self.P.shape[0] != self.Q.shape[0]:
            raise ValueError("receiver and source matrices disagree on node count")
        for name, M in (("receiver", self.P), ("source", self.Q)):
            if np.any(np.diff(M.indptr) == 0):
                raise ValueError(f"{name} matrix has an empty column")
        if self.D_obs is not None:
            self.D_obs = np.asarray(self.D_obs, dtype=float)
            if self.D_obs.shape != (self.n_receivers, self.n_sources):
                raise ValueError("observed data shape does not match survey")

    @property
    def n_receivers(self):
        return self.P.shape[1]

    @property
    def n_sources(self):
        return self.Q.shape[1]


@dataclass
class FullState:
    op: object
    factor: object
    U: np.ndarray
    solver_info: dict = field(default_factory=dict)


@dataclass
class ReducedState:
    op: object
    basis: object
    A_k: np.ndarray
    chol: object
    T: np.ndarray
    shift: float = 0.0
    _sparse_factor: object = None

    def solve_reduced(self, B):
        if self.chol is not None:
            return sla.cho_solve(self.chol, B)
        return self._sparse_factor.solve(B)


def forward_full(op, survey, solver="direct", cg_tol=1e-6, cg_maxit=100):
    """Predicted data and fields of the fine-mesh problem.

    ``solver`` selects a sparse direct factorization or block CG (with the
    given tolerance/iteration budget).
    """
    Qd = survey.Q.toarray()
    if solver == "direct":
        factor = direct_factorize(op.A)
        U = factor.solve(Qd)
        info = {}
    elif solver == "blockcg":
        res = block_cg(op.A, Qd, tol=cg_tol, maxit=cg_maxit)
        factor = None
        U = res.X
        info = {"iterations": res.iterations, "relres": res.relres,
                "converged": res.converged}
    else:
        raise ValueError(f"unknown solver {solver!r}")
    D = survey.P.T @ U
    return np.asarray(D), FullState(op=op, factor=factor, U=U, solver_info=info)


def _project_operator(op, basis):
    return (basis.S.T @ (op.A @ basis.S)).toarray()


def forward_reduced(op, survey, basis):
    """Predicted data through the projected problem.

    The basis may be frozen (built at a reference model) or adapted to the
    operator's model; only derivative operators insist on the latter.  The
    projected operator gets a tiny diagonal shift if its factorization detects
    near-singularity (merged families may be nearly dependent); the shift is
    reported on the state.
    """
    k = basis.k
    rhs = np.asarray((basis.S.T @ survey.Q).todense()) if sp.issparse(survey.Q) \
        else basis.S.T @ survey.Q
    if k <= DENSE_REDUCED_LIMIT:
        A_k = _project_operator(op, basis)
        shift = 0.0
        try:
            chol = sla.cho_factor(A_k, lower=True)
        except sla.LinAlgError:
            shift = 1e-12 * np.trace(A_k) / k
            try:
                chol = sla.cho_factor(A_k + shift * np.eye(k), lower=True)
            except sla.LinAlgError as exc:
                raise ReducedSingularError(
                    "projected operator is singular even after diagonal shift"
                ) from exc
        state = ReducedState(op=op, basis=basis, A_k=A_k, chol=chol,
                             T=None, shift=shift)
    else:
        A_k = (basis.S.T @ (op.A @ basis.S)).tocsc()
        shift = 0.0
        try:
            factor = direct_factorize(A_k)
        except Exception:
            shift = 1e-12 * A_k.diagonal().sum() / k
            factor = direct_factorize(A_k + shift * sp.eye(k, format="csc"))
        state = ReducedState(op=op, basis=basis, A_k=A_k, chol=None, T=None,
                             shift=shift, _sparse_factor=factor)
    state.T = state.solve_reduced(rhs)
    D = survey.P.T @ (basis.S @ state.T)
    return np.asarray(D), state


class FullSensitivity:
    """Sensitivity of the fine-mesh forward map (matrix-free)."""

    mode = "full"

    def __init__(self, state, survey, cg_tol=1e-6, cg_maxit=100):
        from .operators import grad_A_u

        op = state.op
        self.survey = survey
        if state.factor is not None:
            self._solve = state.factor.solve
        else:
            A = op.A
            self._solve = lambda B: block_cg(A, B, tol=cg_tol, maxit=cg_maxit).X
        self.G = [grad_A_u(op.mesh, op.m, state.U[:, j],
                           pieces=(op.grad, op.cell_map))
                  for j in range(survey.n_sources)]

    def apply(self, dm):
        W = np.column_stack([Gj @ dm for Gj in self.G])
        return -np.asarray(self.survey.P.T @ self._solve(W))

    def rapply(self, W):
        V = self._solve(np.asarray(self.survey.P @ W))
        out = np.zeros(self.G[0].shape[1])
        for j, Gj in enumerate(self.G):
            out -= Gj.T @ V[:, j]
        return out


class FixedSensitivity:
    """Sensitivity of the projected map with the basis held frozen."""

    mode = "ms_fixed"

    def __init__(self, state, survey):
        from .operators import grad_A_u

        op = state.op
        self.survey = survey
        self.state = state
        S = state.basis.S
        self.S = S
        self.PS = np.asarray((survey.P.T @ S).todense())
        fields = S @ state.T
        self.G = [grad_A_u(op.mesh, op.m, fields[:, j],
                           pieces=(op.grad, op.cell_map))
                  for j in range(survey.n_sources)]

    def apply(self, dm):
        Z = np.column_stack([self.S.T @ (Gj @ dm) for Gj in self.G])
        return -(self.PS @ self.state.solve_reduced(Z))

    def rapply(self, W):
        Y = self.state.solve_reduced(self.PS.T @ np.asarray(W))
        out = np.zeros(self.G[0].shape[1])
        for j, Gj in enumerate(self.G):
            out -= Gj.T @ (self.S @ Y[:, j])
        return out


class AdaptiveSensitivity:
    """Sensitivity of the projected map including the basis' model dependence.

    Per source ``j`` with coefficients ``t_j`` and fine residual
    ``r_j = q_j - A S t_j``::

        J dm = P^T ( dS(t_j) dm + S dt_j )
        dt_j = A_k^{-1} ( dSt(r_j) dm - S^T (G_j dm + A dS(t_j) dm) )

    where ``dS``/``dSt`` are the directional derivatives of the basis and of
    its transpose, applied block-locally through the cached factorizations.
    """

    mode = "ms_adaptive"

    def __init__(self, state, survey, workers=1):
        op = state.op
        basis = state.basis
        basis.check_model(op.m)
        self.survey = survey
        self.state = state
        self.basis = basis
        self.workers = workers
        self.A = op.A
        self.S = basis.S
        self.PS = np.asarray((survey.P.T @ basis.S).todense())
        G, C = basis.pieces
        self.Gp = G[:, 1:].tocsr()
        self.Csig = (C @ sp.diags(sigma_deriv(op.m))).tocsr()
        self.EP = basis.edge_profiles.tocsr()

        T = state.T
        fields = basis.S @ T
        Qd = survey.Q.toarray()
        R = Qd - op.A @ fields
        self.gprof = [basis.grad_edge(T[:, j]) for j in range(survey.n_sources)]
        self.gu = [self.Gp @ fields[:, j] for j in range(survey.n_sources)]
        self.a = [self.Gp @ basis.interior_solve(R[:, j], workers=workers)
                  for j in range(survey.n_sources)]

    # directional-derivative building blocks (edge-space forms)
    def _Y_dm(self, j, c):
        return -self.basis.interior_solve(self.Gp.T @ (self.gprof[j] * c),
                                          workers=self.workers)

    def _Yt_w(self, j, w):
        z = self.basis.interior_solve(w, workers=self.workers)
        return -(self.Csig.T @ (self.gprof[j] * (self.Gp @ z)))

    def apply(self, dm):
        c = self.Csig @ np.asarray(dm, dtype=float)
        ns = self.survey.n_sources
        out = np.zeros((self.survey.n_receivers, ns))
        for j in range(ns):
            ydm = self._Y_dm(j, c)
            xdm = -(self.EP.T @ (self.a[j] * c))
            gdm = self.Gp.T @ (self.gu[j] * c)
            rhs = xdm - self.S.T @ (gdm + self.A @ ydm)
            dt = self.state.solve_reduced(rhs)
            out[:, j] = self.survey.P.T @ (ydm + self.S @ dt)
        return out

    def rapply(self, W):
        W = np.asarray(W, dtype=float)
        out = np.zeros(self.Csig.shape[1])
        for j in range(self.survey.n_sources):
            p = np.asarray(self.survey.P @ W[:, j]).ravel()
            y = self.state.solve_reduced(self.S.T @ p)
            sy = self.S @ y
            out += self._Yt_w(j, p - self.A @ sy)
            out -= self.Csig.T @ (self.a[j] * (self.EP @ y))
            out -= self.Csig.T @ (self.gu[j] * (self.Gp @ sy))
        return out


def sensitivity_full(state, survey):
    return FullSensitivity(state, survey)


def sensitivity_fixed(state, survey):
    return FixedSensitivity(state, survey)


def sensitivity_adaptive(state, survey, workers=1):
    return AdaptiveSensitivity(state, survey, workers=workers)
