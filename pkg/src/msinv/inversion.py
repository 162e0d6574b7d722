"""Bound-constrained Gauss-Newton inversion over the three forward modes.

The outer loop is shared: each iteration linearizes the chosen forward map,
solves the regularized normal equations by CG restricted to the inactive set,
and backtracks along the projected step until the Armijo condition holds.
Mode-specific behavior (full mesh, frozen projection, re-adapted projection)
lives in small problem classes with ``simulate``/``jacobian`` methods.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .forward import (
    forward_full, forward_reduced,
    sensitivity_full, sensitivity_fixed, sensitivity_adaptive,
)
from .operators import assemble_operator


def misfit_ssd(D_pred, D_obs):
    """Half the squared Frobenius distance, plus the residual block."""
    D_pred = np.asarray(D_pred, dtype=float)
    D_obs = np.asarray(D_obs, dtype=float)
    if D_pred.shape != D_obs.shape:
        raise ValueError(f"data shapes differ: {D_pred.shape} vs {D_obs.shape}")
    resid = D_pred - D_obs
    return 0.5 * float(np.sum(resid * resid)), resid


def cell_gradient(mesh):
    """Difference operator from cell centers to internal faces (one row per
    facing cell pair, entries -+1/h); annihilates constant models."""
    n = (mesh.n1, mesh.n2, mesh.n3)
    h = (mesh.h1, mesh.h2, mesh.h3)
    rows, cols, vals = [], [], []
    offset = 0
    for axis in range(3):
        dims = list(n)
        dims[axis] -= 1
        if dims[axis] == 0:
            continue
        i, j, k = np.meshgrid(*[np.arange(d) for d in dims], indexing="ij")
        i, j, k = i.ravel(order="F"), j.ravel(order="F"), k.ravel(order="F")
        a = mesh.cell_index(i, j, k)
        step = [0, 0, 0]
        step[axis] = 1
        b = mesh.cell_index(i + step[0], j + step[1], k + step[2])
        ne = a.size
        r = offset + np.arange(ne)
        rows.append(np.concatenate([r, r]))
        cols.append(np.concatenate([a, b]))
        inv = 1.0 / h[axis]
        vals.append(np.concatenate([np.full(ne, -inv), np.full(ne, inv)]))
        offset += ne
    if not rows:
        return sp.csr_matrix((0, mesh.n_cells))
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(offset, mesh.n_cells),
    ).tocsr()


@dataclass
class Objective:
    """Tikhonov smoothness term ``alpha/2 ||L (m - m_ref)||^2`` on cell centers."""

    mesh: object
    alpha: float
    m_ref: np.ndarray
    L: sp.csr_matrix = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("regularization weight must be >= 0")
        self.m_ref = np.asarray(self.m_ref, dtype=float)
        if self.L is None:
            self.L = cell_gradient(self.mesh)
        self._LtL = (self.L.T @ self.L).tocsr()

    def value_grad(self, m):
        d = np.asarray(m, dtype=float) - self.m_ref
        Ld = self.L @ d
        return 0.5 * self.alpha * float(Ld @ Ld), self.alpha * (self.L.T @ Ld)

    def hess_apply(self, v):
        return self.alpha * (self._LtL @ v)


def tikhonov_reg(m, m_ref, alpha, mesh, L=None):
    """Value and gradient of the diffusion regularizer."""
    obj = Objective(mesh=mesh, alpha=alpha, m_ref=m_ref, L=L)
    return obj.value_grad(m)


def project_bounds(m, m_L=None, m_H=None):
    """Clamp to the box and report which entries ended up at a bound."""
    m = np.asarray(m, dtype=float)
    lo = np.full_like(m, -np.inf) if m_L is None else np.broadcast_to(
        np.asarray(m_L, dtype=float), m.shape)
    hi = np.full_like(m, np.inf) if m_H is None else np.broadcast_to(
        np.asarray(m_H, dtype=float), m.shape)
    if np.any(lo > hi):
        raise ValueError("lower bound exceeds upper bound")
    out = np.minimum(np.maximum(m, lo), hi)
    active = (out <= lo) | (out >= hi)
    return out, active


def add_noise(D_clean, level, seed):
    """Additive Gaussian noise with standard deviation
    ``level * ||D||_F / sqrt(D.size)``; deterministic for a given seed."""
    if level < 0:
        raise ValueError("noise level must be >= 0")
    D_clean = np.asarray(D_clean, dtype=float)
    sd = level * np.linalg.norm(D_clean) / np.sqrt(D_clean.size)
    rng = np.random.default_rng(seed)
    return D_clean + rng.normal(0.0, 1.0, size=D_clean.shape) * sd


@dataclass
class GNConfig:
    max_gn: int = 10
    max_cg: int = 15
    cg_rtol: float = 1e-8
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 10
    grad_tol_rel: float = 1e-10
    lower: object = None
    upper: object = None

    def __post_init__(self):
        if self.max_gn < 1 or self.max_cg < 1:
            raise ValueError("iteration budgets must be >= 1")
        if not 0 < self.armijo_c <= 0.5:
            raise ValueError("Armijo constant must lie in (0, 0.5]")


@dataclass
class InversionTrace:
    """Per-iteration log of the outer loop; row 0 is the initial state."""

    rows: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    line_search_failed: bool = False
    final_model: np.ndarray = None

    COLUMNS = ("iter", "phi", "reg", "total", "pgnorm", "step",
               "cg_iters", "active", "rebuilt")

    def add(self, **kw):
        self.rows.append({c: kw[c] for c in self.COLUMNS})

    def totals(self):
        return np.asarray([r["total"] for r in self.rows])


def _masked_cg(hess, rhs, inactive, maxit, rtol):
    """CG on the inactive subspace; returns (step, iterations)."""
    x = np.zeros_like(rhs)
    r = rhs * inactive
    rhs_norm = np.linalg.norm(r)
    if rhs_norm == 0:
        return x, 0
    p = r.copy()
    rr = float(r @ r)
    it = 0
    while it < maxit:
        Hp = hess(p) * inactive
        pHp = float(p @ Hp)
        if pHp <= 0:
            break
        alpha = rr / pHp
        x += alpha * p
        r -= alpha * Hp
        it += 1
        rr_new = float(r @ r)
        if np.sqrt(rr_new) <= rtol * rhs_norm:
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x, it


def projected_gauss_newton(problem, m0, d_obs, objective, config):
    """Run the bound-constrained Gauss-Newton loop; returns (model, trace).

    A failed line search terminates the loop with a trace flag rather than an
    exception.  Accepted steps never increase the total objective.
    """
    m, _ = project_bounds(np.asarray(m0, dtype=float), config.lower, config.upper)
    trace = InversionTrace()

    D, state = problem.simulate(m)
    phi, resid = misfit_ssd(D, d_obs)
    reg, reg_grad = objective.value_grad(m)
    total = phi + reg
    if getattr(state, "shift", 0.0):
        trace.notes.append(f"iter 0: diagonal shift {state.shift:.3e} applied")

    lo = np.full_like(m, -np.inf) if config.lower is None else \
        np.broadcast_to(np.asarray(config.lower, dtype=float), m.shape)
    hi = np.full_like(m, np.inf) if config.upper is None else \
        np.broadcast_to(np.asarray(config.upper, dtype=float), m.shape)

    pg0 = None
    rebuilt0 = problem.mode != "full"
    it = 0
    while True:
        J = problem.jacobian(state)
        g = J.rapply(resid) + reg_grad
        # bound is binding and the step direction would leave the box
        active = ((m <= lo) & (g > 0)) | ((m >= hi) & (g < 0))
        inactive = (~active).astype(float)
        pgnorm = float(np.linalg.norm(g * inactive))

        if pg0 is None:
            pg0 = pgnorm
            trace.add(iter=0, phi=phi, reg=reg, total=total, pgnorm=pgnorm,
                      step=0.0, cg_iters=0, active=int(active.sum()),
                      rebuilt=rebuilt0)

        if it >= config.max_gn or pgnorm <= config.grad_tol_rel * pg0:
            break

        def hess(v):
            Jv = J.apply(v)
            return J.rapply(Jv) + objective.hess_apply(v)

        dm, cg_iters = _masked_cg(hess, -g, inactive, config.max_cg, config.cg_rtol)

        step = 1.0
        accepted = False
        for _ in range(config.max_backtracks + 1):
            m_trial, _ = project_bounds(m + step * dm, config.lower, config.upper)
            D_t, state_t = problem.simulate(m_trial)
            phi_t, resid_t = misfit_ssd(D_t, d_obs)
            reg_t, reg_grad_t = objective.value_grad(m_trial)
            total_t = phi_t + reg_t
            if total_t <= total + config.armijo_c * float(g @ (m_trial - m)):
                accepted = True
                break
            step *= config.backtrack
        it += 1
        if not accepted:
            trace.line_search_failed = True
            trace.notes.append(f"iter {it}: line search failed, stopping")
            break

        m, D, state = m_trial, D_t, state_t
        phi, resid = phi_t, resid_t
        reg, reg_grad = reg_t, reg_grad_t
        total = total_t
        if getattr(state, "shift", 0.0):
            trace.notes.append(f"iter {it}: diagonal shift {state.shift:.3e} applied")
        trace.add(iter=it, phi=phi, reg=reg, total=total, pgnorm=pgnorm,
                  step=step, cg_iters=cg_iters, active=int(active.sum()),
                  rebuilt=problem.mode == "ms_adaptive")

    trace.final_model = m.copy()
    return m, trace


class FullProblem:
    """Fine-mesh forward/sensitivity pair."""

    mode = "full"

    def __init__(self, mesh, survey, solver="direct", cg_tol=1e-6, cg_maxit=100):
        self.mesh = mesh
        self.survey = survey
        self.solver = solver
        self.cg_tol = cg_tol
        self.cg_maxit = cg_maxit

    def simulate(self, m):
        op = assemble_operator(self.mesh, m)
        return forward_full(op, self.survey, solver=self.solver,
                            cg_tol=self.cg_tol, cg_maxit=self.cg_maxit)

    def jacobian(self, state):
        return sensitivity_full(state, self.survey)


class FixedReducedProblem:
    """Projection frozen at the model of the first simulate call."""

    mode = "ms_fixed"

    def __init__(self, builder, survey):
        self.builder = builder
        self.survey = survey
        self.basis = None

    def simulate(self, m):
        op = assemble_operator(self.builder.partition.mesh, m)
        if self.basis is None:
            self.basis = self.builder.assemble(op)
        return forward_reduced(op, self.survey, self.basis)

    def jacobian(self, state):
        return sensitivity_fixed(state, self.survey)


class AdaptiveReducedProblem:
    """Projection rebuilt at every model the loop evaluates."""

    mode = "ms_adaptive"

    def __init__(self, builder, survey, workers=1):
        self.builder = builder
        self.survey = survey
        self.workers = workers

    def simulate(self, m):
        op = assemble_operator(self.builder.partition.mesh, m)
        basis = self.builder.assemble(op, workers=self.workers)
        return forward_reduced(op, self.survey, basis)

    def jacobian(self, state):
        return sensitivity_adaptive(state, self.survey, workers=self.workers)
