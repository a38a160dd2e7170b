"""Dense convex QP/LP solver via operator splitting with active-set polishing.

Solves problems of the form

    maximize   lin @ y - y @ quad @ y + const
    subject to A_ub @ y <= b_ub

by alternating a regularized KKT solve with a projection onto the
constraint box, in the style of first-order splitting QP codes.  After the
splitting converges, the active constraint set is polished by one equality-
constrained solve, which typically lands on machine-precision KKT residuals
even for linear programs.  Primal infeasibility is detected from the
divergence direction of the dual iterates.

The implementation is deliberately dense: the intended problems have at most
a few hundred variables, where one LU factorization of the KKT matrix per
step-size update is cheap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .qp_builder import QpProblem, QpSolution

__all__ = ["SolverSettings", "SolverError", "solve"]


class SolverError(RuntimeError):
    """Structural solver failure (non-convex input or unbounded problem)."""


@dataclass(frozen=True)
class SolverSettings:
    abs_tol: float = 1e-8
    rel_tol: float = 1e-8
    max_iterations: int = 50_000
    infeasibility_tol: float = 1e-9
    sigma: float = 1e-6
    rho: float = 0.1
    alpha: float = 1.6
    check_interval: int = 25

    def __post_init__(self) -> None:
        if min(self.abs_tol, self.rel_tol, self.infeasibility_tol) <= 0:
            raise ValueError("tolerances must be positive")


def _ruiz_equilibrate(P, q, A, b, iters: int = 10):
    """Symmetric scaling of variables and constraint rows to unit inf-norms.

    The cost vector participates in the column norms: a variable that only
    appears in the objective (e.g. a heavily weighted slack) would otherwise
    keep its raw scale and stall the first-order iteration.
    """
    n = P.shape[0]
    mrows = A.shape[0]
    d = np.ones(n)
    e = np.ones(mrows)
    Ps, qs, As, bs = P.copy(), q.copy(), A.copy(), b.copy()
    for _ in range(iters):
        col_norm = np.maximum(np.abs(Ps).max(axis=0, initial=0.0),
                              np.abs(As).max(axis=0, initial=0.0))
        col_norm = np.maximum(col_norm, np.abs(qs))
        col_norm[col_norm == 0] = 1.0
        dd = 1.0 / np.sqrt(col_norm)
        row_norm = np.abs(As).max(axis=1, initial=0.0)
        row_norm[row_norm == 0] = 1.0
        ee = 1.0 / np.sqrt(row_norm)
        Ps = Ps * dd[:, None] * dd[None, :]
        qs = qs * dd
        As = As * ee[:, None] * dd[None, :]
        bs = bs * ee
        d *= dd
        e *= ee
    cost_scale = max(np.abs(Ps).max(initial=0.0), np.abs(qs).max(initial=0.0))
    cost = 1.0 / cost_scale if cost_scale > 0 else 1.0
    return Ps * cost, qs * cost, As, bs, d, e, cost


def _polish(P, q, A, b, x, y, feas_tol: float):
    """Equality solve on the estimated active set; None when not verifiable.

    A verified result satisfies the full KKT system (stationarity, primal
    feasibility, non-negative multipliers, complementary slackness), which
    certifies global optimality of the convex problem.
    """
    n = P.shape[0]
    scale = max(1.0, float(np.abs(b).max(initial=0.0)))
    dual_scale = max(1.0, float(np.abs(q).max(initial=0.0)))
    # proximal anchor keeps directions the active rows leave free at the
    # splitting iterate, which matters on degenerate (non-vertex) optima
    mu = 1e-9 * max(1.0, float(np.abs(P).max(initial=0.0)))
    slack = b - A @ x if A.size else np.zeros(0)
    tried: set[tuple[int, ...]] = set()
    for active_tol in (1e-7 * scale, 1e-5 * scale, 1e-9 * scale):
        active = np.flatnonzero((slack <= active_tol) | (y > active_tol))
        key = tuple(active)
        if key in tried:
            continue
        tried.add(key)
        A_act = A[active]
        kkt = np.block([[P + mu * np.eye(n), A_act.T],
                        [A_act, np.zeros((len(active), len(active)))]])
        rhs = np.concatenate([-q + mu * x, b[active]])
        try:
            sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        except np.linalg.LinAlgError:
            continue
        x_hat = sol[:n]
        nu = np.maximum(sol[n:], 0.0)
        y_hat = np.zeros_like(y)
        y_hat[active] = nu
        resid = A @ x_hat - b if A.size else np.zeros(0)
        viol = float(resid.max(initial=0.0))
        stationarity = float(np.abs(P @ x_hat + q + A.T @ y_hat).max(initial=0.0))
        complementarity = float(np.abs(y_hat * resid).max(initial=0.0))
        if (viol <= feas_tol and stationarity <= 1e-7 * dual_scale
                and complementarity <= 1e-7 * dual_scale * scale):
            return x_hat, y_hat
    return None


def solve(problem: QpProblem, settings: SolverSettings | None = None) -> QpSolution:
    """Solve the problem; status is optimal, infeasible, or iteration-limit."""
    settings = settings or SolverSettings()
    n = problem.n_vars

    # internal minimize form: 1/2 x' P x + q' x  s.t.  A x <= b
    P = np.asarray(2.0 * problem.quad, dtype=float)
    P = 0.5 * (P + P.T)
    q = -np.asarray(problem.lin, dtype=float)
    if n and np.any(problem.quad):
        if np.linalg.eigvalsh(P).min() < -1e-8 * max(1.0, np.abs(P).max()):
            raise SolverError("quadratic block is not positive semidefinite")

    # presolve: drop empty rows, catching constant infeasibilities
    A_full = np.asarray(problem.A_ub, dtype=float)
    b_full = np.asarray(problem.b_ub, dtype=float)
    feas_tol = 10.0 * settings.abs_tol
    row_mass = np.abs(A_full).max(axis=1, initial=0.0) if A_full.size else np.zeros(0)
    empty = row_mass == 0.0
    if np.any(b_full[empty] < -feas_tol):
        return _finish(problem, np.zeros(n), "infeasible", 0, np.nan, np.nan)
    keep = ~empty
    A = A_full[keep]
    b = b_full[keep]
    mrows = A.shape[0]

    if mrows == 0:
        # unconstrained: stationary point of the quadratic (or detect unbounded LP)
        if np.any(P):
            x = np.linalg.lstsq(P, -q, rcond=None)[0]
            if np.abs(P @ x + q).max(initial=0.0) > 1e-6 * max(1.0, np.abs(q).max(initial=0.0)):
                raise SolverError("problem is unbounded")
            return _finish(problem, x, "optimal", 0, 0.0, 0.0)
        if np.any(q):
            raise SolverError("problem is unbounded")
        return _finish(problem, np.zeros(n), "optimal", 0, 0.0, 0.0)

    Ps, qs, As, bs, d_scale, e_scale, cost_scale = _ruiz_equilibrate(P, q, A, b)

    sigma = settings.sigma
    rho = settings.rho
    alpha = settings.alpha

    def factor(rho_val: float):
        kkt = np.block([
            [Ps + sigma * np.eye(n), As.T],
            [As, -np.eye(mrows) / rho_val],
        ])
        return scipy.linalg.lu_factor(kkt, check_finite=False)

    lu = factor(rho)
    x = np.zeros(n)
    z = np.zeros(mrows)
    y = np.zeros(mrows)
    y_unscaled_prev = np.zeros(mrows)
    x_unscaled_prev = np.zeros(n)
    last_polish = -10**9
    b_scale = max(1.0, float(np.abs(b).max(initial=0.0)))

    status = "iteration-limit"
    iters_done = settings.max_iterations
    r_prim = r_dual = np.nan

    q_norm = max(1.0, float(np.abs(q).max(initial=0.0)))

    for it in range(1, settings.max_iterations + 1):
        rhs = np.concatenate([sigma * x - qs, z - y / rho])
        sol = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
        x_tilde = sol[:n]
        nu = sol[n:]
        z_tilde = z + (nu - y) / rho

        x_prev = x
        x = alpha * x_tilde + (1 - alpha) * x_prev
        z_relaxed = alpha * z_tilde + (1 - alpha) * z
        z_new = np.minimum(z_relaxed + y / rho, bs)
        y = y + rho * (z_relaxed - z_new)
        z = z_new

        if it % settings.check_interval == 0 or it == settings.max_iterations:
            # unscaled iterates and residuals
            x_u = d_scale * x
            y_u = e_scale * y / cost_scale
            Ax = A @ x_u
            z_u = z / e_scale
            r_prim = float(np.abs(Ax - z_u).max(initial=0.0))
            r_dual = float(np.abs(P @ x_u + q + A.T @ y_u).max(initial=0.0))
            eps_prim = settings.abs_tol + settings.rel_tol * max(
                np.abs(Ax).max(initial=0.0), np.abs(z_u).max(initial=0.0))
            eps_dual = settings.abs_tol + settings.rel_tol * max(
                np.abs(P @ x_u).max(initial=0.0), np.abs(q).max(initial=0.0),
                np.abs(A.T @ y_u).max(initial=0.0))

            # opportunistic polish once the iterates are roughly converged;
            # the strict KKT verification inside _polish keeps this safe
            roughly = r_prim <= 1e-2 * b_scale and r_dual <= 1e4 * eps_dual
            if roughly and it - last_polish >= 100:
                last_polish = it
                polished = _polish(P, q, A, b, x_u, y_u, feas_tol)
                if polished is not None:
                    x_final, y_final = polished
                    status, iters_done = "optimal", it
                    r_prim = float((A @ x_final - b).max(initial=0.0))
                    r_dual = float(np.abs(P @ x_final + q + A.T @ y_final).max(initial=0.0))
                    break

            if r_prim <= eps_prim and r_dual <= eps_dual:
                status, iters_done = "optimal", it
                x_final, y_final = x_u, y_u
                break

            # primal infeasibility certificate from the dual divergence direction
            dy = y_u - y_unscaled_prev
            dy_pos = np.maximum(dy, 0.0)
            dy_norm = float(np.abs(dy_pos).max(initial=0.0))
            if dy_norm > settings.infeasibility_tol:
                if (np.abs(A.T @ dy_pos).max(initial=0.0) <= 1e-6 * dy_norm * max(1.0, np.abs(A).max())
                        and float(b @ dy_pos) < -1e-8 * dy_norm * max(1.0, np.abs(b).max(initial=0.0))):
                    status, iters_done = "infeasible", it
                    x_final, y_final = x_u, y_u
                    break
            y_unscaled_prev = y_u

            # dual infeasibility (unbounded objective) is a builder bug
            dx = x_u - x_unscaled_prev
            dx_norm = float(np.abs(dx).max(initial=0.0))
            if dx_norm > settings.infeasibility_tol:
                a_scale = max(1.0, float(np.abs(A).max()))
                if (np.abs(P @ dx).max(initial=0.0) <= 1e-6 * dx_norm * max(1.0, np.abs(P).max())
                        and float(q @ dx) < -1e-8 * dx_norm * q_norm
                        and (A @ dx).max(initial=0.0) <= 1e-6 * dx_norm * a_scale):
                    raise SolverError("objective is unbounded along a feasible ray")
            x_unscaled_prev = x_u

    else:
        x_final = d_scale * x
        y_final = e_scale * y / cost_scale

    if status == "iteration-limit":
        polished = _polish(P, q, A, b, x_final, y_final, feas_tol)
        if polished is not None:
            x_final, _ = polished
            status = "optimal"
            r_prim = float((A @ x_final - b).max(initial=0.0))
            r_dual = 0.0

    return _finish(problem, x_final, status, iters_done, r_prim, r_dual)


def _finish(problem: QpProblem, y_vec: np.ndarray, status: str, iterations: int,
            r_prim: float, r_dual: float) -> QpSolution:
    lay = problem.layout
    inputs = y_vec[lay.u_slice].reshape(lay.n_steps, lay.n_inputs)
    return QpSolution(
        status=status,
        objective=problem.objective_value(y_vec) if status != "infeasible" else float("nan"),
        y=y_vec,
        inputs=inputs,
        epigraph=y_vec[lay.epigraph_slice].copy(),
        slacks=y_vec[lay.slack_slice].copy(),
        iterations=iterations,
        primal_residual=r_prim,
        dual_residual=r_dual,
    )
