"""Backward-Euler time stepping with Newton's method.

Linear systems are solved by diagonal-preconditioned BiCGStab; small
systems fall back to a sparse direct factorization, which the test
oracles also use.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, bicgstab, spsolve

from .fem import (BlockSystem, StateFields, assemble_jacobian,
                  assemble_reaction_residuals)
from .mesh import SimplicialMesh
from .model import ModelParams

__all__ = [
    "TimeStepRecord",
    "NewtonOptions",
    "NewtonError",
    "LinearSolveError",
    "linear_solve",
    "newton_solve",
    "time_loop",
]

DIRECT_DIM_LIMIT = 3000


class LinearSolveError(Exception):
    def __init__(self, msg, iterations=None, residual=None):
        super().__init__(msg)
        self.iterations = iterations
        self.residual = residual


class NewtonError(Exception):
    """Newton failed to converge; carries the best iterate and history."""

    def __init__(self, msg, best_state=None, history=None):
        super().__init__(msg)
        self.best_state = best_state
        self.history = history or []


@dataclass
class TimeStepRecord:
    n: int
    t_n: float
    tau_n: float
    k_n: int
    newton_residual_history: list = field(default_factory=list)
    linear_iters: int = 0
    mesh_id: str = ""


@dataclass(frozen=True)
class NewtonOptions:
    abs_tol: float = 1e-10
    rel_tol: float = 1e-8
    max_iter: int = 20
    linear_rtol: float = 1e-10


def linear_solve(A, rhs: np.ndarray, rtol: float = 1e-10):
    """Solve A x = rhs to a relative residual of ``rtol``.

    Returns (x, iterations).  BiCGStab with diagonal preconditioning;
    direct factorization for systems of dimension <= 3000.
    """
    rhs = np.asarray(rhs, dtype=float)
    nrm = np.linalg.norm(rhs)
    if nrm == 0.0:
        return np.zeros_like(rhs), 0
    dim = A.shape[0]
    if dim <= DIRECT_DIM_LIMIT:
        mat = A.tocsr() if isinstance(A, BlockSystem) else sparse.csr_matrix(A)
        x = spsolve(mat.tocsc(), rhs)
        res = np.linalg.norm(mat @ x - rhs) / nrm
        if res > max(rtol, 1e-8):
            raise LinearSolveError(
                f"direct solve residual {res:.2e} exceeds tolerance",
                residual=res)
        return x, 1
    diag = A.diagonal()
    if np.any(diag == 0.0):
        raise LinearSolveError("zero diagonal entry; cannot precondition")
    op = LinearOperator(A.shape, matvec=(A.matvec if isinstance(A, BlockSystem)
                                         else lambda x: A @ x))
    pre = LinearOperator(A.shape, matvec=lambda x: x / diag)
    iters = 0

    def cb(_):
        nonlocal iters
        iters += 1

    x, info = bicgstab(op, rhs, rtol=rtol * 0.1, atol=0.0, M=pre,
                       maxiter=5000, callback=cb)
    res = np.linalg.norm((A @ x) - rhs) / nrm
    if info != 0 or res > rtol:
        raise LinearSolveError(
            f"Krylov stagnation after {iters} iterations, residual {res:.2e}",
            iterations=iters, residual=res)
    return x, iters


def _residual_and_mask(mesh, state, prev_state, tau, params, forcing, t):
    fu, fv, fw = assemble_reaction_residuals(
        mesh, state, prev_state, tau, params,
        forcing=(None if forcing is None else (lambda xq: forcing(xq, t))))
    F = np.concatenate([fu, fv, fw])
    unused = ~mesh.used_mask
    if unused.any():
        mask = np.tile(unused, 3)
        F[mask] = 0.0
    return F


def _jacobian(mesh, state, prev_state, tau, params):
    J = assemble_jacobian(mesh, state, prev_state, tau, params)
    unused = ~mesh.used_mask
    if unused.any():
        bump = sparse.diags(unused.astype(float)).tocsr()
        for i in range(3):
            J.blocks[(i, i)] = J.blocks[(i, i)] + bump
    return J


def newton_solve(mesh: SimplicialMesh, prev_state: StateFields, tau: float,
                 params: ModelParams, opts: NewtonOptions = NewtonOptions(),
                 forcing=None, t: float = 0.0, step_index: int = 0):
    """One backward-Euler step solved by full Newton iteration.

    The initial guess is the previous state.  Raises NewtonError with
    the best iterate attached when max_iter is exhausted.
    """
    if tau <= 0:
        raise ValueError("time step must be positive")
    prev_state.check_mesh(mesh)
    state = prev_state.copy()
    history = []
    linear_total = 0
    F = _residual_and_mask(mesh, state, prev_state, tau, params, forcing, t)
    r0 = np.linalg.norm(F)
    history.append(r0)
    tol = max(opts.abs_tol, opts.rel_tol * r0)
    best = state
    best_r = r0
    k = 0
    while history[-1] > tol:
        if k >= opts.max_iter:
            raise NewtonError(
                f"Newton stalled at residual {history[-1]:.3e} after "
                f"{k} iterations", best_state=best, history=history)
        J = _jacobian(mesh, state, prev_state, tau, params)
        try:
            dx, its = linear_solve(J, F, rtol=opts.linear_rtol)
        except LinearSolveError as exc:
            raise NewtonError(f"linear solver failed: {exc}",
                              best_state=best, history=history) from exc
        linear_total += its
        x = state.pack() - dx
        state = StateFields.unpack(mesh.mesh_id, x)
        F = _residual_and_mask(mesh, state, prev_state, tau, params,
                               forcing, t)
        r = np.linalg.norm(F)
        history.append(r)
        if r < best_r:
            best, best_r = state, r
        k += 1
    record = TimeStepRecord(n=step_index, t_n=t, tau_n=tau, k_n=max(k, 1),
                            newton_residual_history=history,
                            linear_iters=linear_total, mesh_id=mesh.mesh_id)
    return state, record


def time_loop(mesh: SimplicialMesh, initial_state: StateFields,
              params: ModelParams, t_final: float, tau0: float,
              opts: NewtonOptions = NewtonOptions(), forcing=None,
              callback=None, tau_min: float | None = None,
              keep_states: bool = True):
    """March the system from t=0 to t_final on a fixed mesh.

    The final step is clipped so the loop lands on t_final exactly.  On
    Newton failure the step is retried with tau/2 down to ``tau_min``
    (default tau0 / 64); underflow aborts with the partial trajectory.
    Returns (states, records); states are kept only if ``keep_states``.
    """
    if t_final <= 0 or tau0 <= 0:
        raise ValueError("t_final and tau0 must be positive")
    if tau_min is None:
        tau_min = tau0 / 2**6
    state = initial_state
    t = 0.0
    n = 0
    states = []
    records = []
    while t < t_final - 1e-14:
        tau = min(tau0, t_final - t)
        while True:
            try:
                new_state, rec = newton_solve(
                    mesh, state, tau, params, opts, forcing=forcing,
                    t=t + tau, step_index=n + 1)
                break
            except NewtonError as exc:
                tau /= 2.0
                if tau < tau_min:
                    raise NewtonError(
                        f"time step underflow at t={t:.6g}: {exc}",
                        best_state=state, history=records) from exc
        t = t + tau
        if abs(t - t_final) < 1e-13:
            t = t_final
            rec.t_n = t_final
        state = new_state
        n += 1
        records.append(rec)
        if keep_states:
            states.append(state)
        if callback is not None:
            callback(state, rec)
    return states, records
