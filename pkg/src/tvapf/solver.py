"""Smooth NLP solving contract shared by the trajectory planner and the
tracking controller.

The implementation is a primal-dual interior-point method: inequality
constraints get slacks with a log barrier, box bounds are handled by a direct
barrier, and each iteration factorizes one sparse symmetric KKT system.  All
linear algebra goes through scipy.sparse, which keeps the multiple-shooting
planner problems (hundreds of variables, block-banded Jacobians) in the
millisecond range per iteration.  The solver is deterministic: identical
problems, options and initial guesses produce identical iterate sequences.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class CallbackFailure(Exception):
    """A user callback returned a non-finite value at an accepted point."""


class SolveStatus(enum.Enum):
    OPTIMAL = "optimal"
    FEASIBLE_POINT = "feasible_point"
    INFEASIBLE = "infeasible"
    ITER_LIMIT = "iteration_limit"


@dataclass
class NlpProblem:
    """Smooth nonlinear program
        min f(z)  s.t.  c_eq(z) = 0,  c_ineq(z) <= 0,  lb <= z <= ub.

    All callbacks must be deterministic.  ``hessian(z, y_eq, w_ineq)`` may
    return any symmetric positive-semidefinite approximation of the Lagrangian
    Hessian (sparse or dense); if omitted, a damped BFGS approximation is
    maintained internally.
    """

    n: int
    objective: Callable
    gradient: Callable
    z0: np.ndarray
    eq_constraints: Optional[Callable] = None
    eq_jacobian: Optional[Callable] = None
    ineq_constraints: Optional[Callable] = None
    ineq_jacobian: Optional[Callable] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    hessian: Optional[Callable] = None


@dataclass
class SolveOptions:
    tol: float = 1e-6
    max_iter: int = 300
    max_wall_time: Optional[float] = None
    mu_init: float = 1e-1
    log_iterations: bool = False


@dataclass
class SolveResult:
    z: np.ndarray
    objective: float
    status: SolveStatus
    iterations: int
    wall_time: float
    kkt_error: float
    constraint_violation: float
    y_eq: np.ndarray
    w_ineq: np.ndarray
    iteration_log: list = field(default_factory=list)


def _finite(x, what):
    if not np.all(np.isfinite(x)):
        raise CallbackFailure(f"non-finite value from {what}")
    return x


def _as_csr(J, m, n):
    if J is None:
        return sp.csr_matrix((m, n))
    if sp.issparse(J):
        return J.tocsr()
    return sp.csr_matrix(np.atleast_2d(np.asarray(J, dtype=float)))


def solve(problem: NlpProblem, opts: SolveOptions | None = None) -> SolveResult:
    """Solve the NLP; see SolveStatus for outcome semantics.

    OPTIMAL means the scaled KKT residuals and constraint violation are below
    tolerance.  If iteration or time limits hit first, the best iterate is
    classified FEASIBLE_POINT when it satisfies the constraints, otherwise
    ITER_LIMIT.  INFEASIBLE is declared when constraint violation stalls above
    tolerance while the barrier parameter has bottomed out.
    """
    opts = opts or SolveOptions()
    t_start = time.perf_counter()

    n = problem.n
    lb = np.full(n, -np.inf) if problem.lb is None else np.asarray(problem.lb, dtype=float)
    ub = np.full(n, np.inf) if problem.ub is None else np.asarray(problem.ub, dtype=float)
    if np.any(ub - lb < 1e-12):
        raise ValueError("degenerate box bounds; use an equality constraint instead")

    z = np.clip(np.asarray(problem.z0, dtype=float).copy(), lb, ub)
    has_lb = np.isfinite(lb)
    has_ub = np.isfinite(ub)
    # strict interior start for the barrier
    margin = np.minimum(1e-3 * np.where(np.isfinite(ub - lb), ub - lb, 1.0), 1e-3)
    margin = np.maximum(margin, 1e-9)
    z = np.where(has_lb, np.maximum(z, lb + margin), z)
    z = np.where(has_ub, np.minimum(z, ub - margin), z)

    def eval_f(x):
        return float(_finite(problem.objective(x), "objective"))

    def eval_g(x):
        return _finite(np.asarray(problem.gradient(x), dtype=float).ravel(), "gradient")

    def eval_ce(x):
        if problem.eq_constraints is None:
            return np.zeros(0)
        return _finite(np.atleast_1d(np.asarray(problem.eq_constraints(x), dtype=float)),
                       "equality constraints")

    def eval_ci(x):
        if problem.ineq_constraints is None:
            return np.zeros(0)
        return _finite(np.atleast_1d(np.asarray(problem.ineq_constraints(x), dtype=float)),
                       "inequality constraints")

    ce = eval_ce(z)
    ci = eval_ci(z)
    me, mi = len(ce), len(ci)

    def eval_Je(x):
        return _as_csr(problem.eq_jacobian(x) if me else None, me, n)

    def eval_Ji(x):
        return _as_csr(problem.ineq_jacobian(x) if mi else None, mi, n)

    mu = opts.mu_init
    s = np.maximum(-ci, 1e-2) if mi else np.zeros(0)
    w = mu / s if mi else np.zeros(0)
    y = np.zeros(me)
    zeta_lo = np.where(has_lb, mu / np.maximum(z - lb, 1e-12), 0.0)
    zeta_up = np.where(has_ub, mu / np.maximum(ub - z, 1e-12), 0.0)

    f_val = eval_f(z)
    g = eval_g(z)
    Je = eval_Je(z)
    Ji = eval_Ji(z)

    # BFGS state when no Hessian callback is supplied
    bfgs_H = sp.eye(n, format="csr") if problem.hessian is None else None
    prev_z = None
    prev_grad_lag = None

    def lagrangian_grad(gv, Jev, Jiv, yv, wv):
        gl = gv.copy()
        if me:
            gl += Jev.T @ yv
        if mi:
            gl += Jiv.T @ wv
        return gl

    def violation(cev, civ):
        v = 0.0
        if me:
            v = max(v, float(np.max(np.abs(cev))))
        if mi:
            v = max(v, float(np.max(np.maximum(civ, 0.0))))
        return v

    def kkt_error(gv, Jev, Jiv, cev, civ, sv, wv, zl, zu, mu_val):
        r_d = lagrangian_grad(gv, Jev, Jiv, yv=y, wv=wv) - zl + zu
        err = float(np.max(np.abs(r_d))) if n else 0.0
        err = max(err, violation(cev, civ))
        if mi:
            err = max(err, float(np.max(np.abs(sv * wv - mu_val))))
        if np.any(has_lb):
            err = max(err, float(np.max(np.abs((z - lb)[has_lb] * zl[has_lb] - mu_val))))
        if np.any(has_ub):
            err = max(err, float(np.max(np.abs((ub - z)[has_ub] * zu[has_ub] - mu_val))))
        return err

    delta_w = 0.0
    iteration_log = []
    best_violation = np.inf
    stall_count = 0
    status = SolveStatus.ITER_LIMIT
    no_step = False
    it = 0

    for it in range(1, opts.max_iter + 1):
        if opts.max_wall_time is not None and time.perf_counter() - t_start > opts.max_wall_time:
            break

        err0 = kkt_error(g, Je, Ji, ce, ci, s, w, zeta_lo, zeta_up, 0.0)
        if err0 < opts.tol:
            status = SolveStatus.OPTIMAL
            break

        # barrier parameter schedule
        err_mu = kkt_error(g, Je, Ji, ce, ci, s, w, zeta_lo, zeta_up, mu)
        if err_mu < 10.0 * mu:
            mu = max(opts.tol / 10.0, min(0.2 * mu, mu ** 1.5))

        # stalled-infeasibility heuristic
        viol = violation(ce, ci)
        if viol < best_violation - max(1e-3 * best_violation, 1e-12):
            best_violation = viol
            stall_count = 0
        else:
            stall_count += 1
        if viol > max(100 * opts.tol, 1e-5) and \
                ((stall_count > 25 and mu <= 1e-4) or stall_count > 60):
            status = SolveStatus.INFEASIBLE
            break

        # Hessian of the Lagrangian (approximate)
        if problem.hessian is not None:
            H = problem.hessian(z, y, w)
            H = H.tocsr() if sp.issparse(H) else sp.csr_matrix(np.atleast_2d(H))
        else:
            grad_lag = lagrangian_grad(g, Je, Ji, y, w)
            if prev_z is not None:
                sk = z - prev_z
                yk = grad_lag - prev_grad_lag
                sts = float(sk @ sk)
                if sts > 1e-16:
                    Hs = bfgs_H @ sk
                    sHs = float(sk @ Hs)
                    sy = float(sk @ yk)
                    # Powell damping keeps the approximation positive definite
                    if sy < 0.2 * sHs:
                        theta = 0.8 * sHs / (sHs - sy) if sHs > sy else 1.0
                        yk = theta * yk + (1.0 - theta) * Hs
                        sy = float(sk @ yk)
                    if sy > 1e-12 and sHs > 1e-12:
                        bfgs_H = (bfgs_H
                                  - sp.csr_matrix(np.outer(Hs, Hs) / sHs)
                                  + sp.csr_matrix(np.outer(yk, yk) / sy))
            prev_z = z.copy()
            prev_grad_lag = grad_lag.copy()
            H = bfgs_H

        # condensed primal-dual system
        d_bound = np.zeros(n)
        d_bound[has_lb] += zeta_lo[has_lb] / (z - lb)[has_lb]
        d_bound[has_ub] += zeta_up[has_ub] / (ub - z)[has_ub]

        rhs_z = -(g + (Je.T @ y if me else 0.0))
        if mi:
            s_safe = np.maximum(s, 1e-12)
            sigma = np.minimum(w / s_safe, 1e12)
            rhs_z = rhs_z - Ji.T @ (sigma * (ci + s) + mu / s_safe)
        rhs_z = rhs_z + np.where(has_lb, mu / np.maximum(z - lb, 1e-300), 0.0)
        rhs_z = rhs_z - np.where(has_ub, mu / np.maximum(ub - z, 1e-300), 0.0)

        accepted = False
        for _ in range(12):
            H_aug = H + sp.diags(d_bound + delta_w)
            if mi:
                H_aug = H_aug + Ji.T @ sp.diags(sigma) @ Ji
            if me:
                kkt = sp.bmat([[H_aug, Je.T], [Je, -1e-10 * sp.eye(me)]], format="csc")
                rhs = np.concatenate([rhs_z, -ce])
            else:
                kkt = sp.csc_matrix(H_aug)
                rhs = rhs_z
            try:
                lu = spla.splu(kkt)
                sol = lu.solve(rhs)
            except RuntimeError:
                delta_w = max(1e-8, 10.0 * (delta_w or 1e-8))
                continue
            if not np.all(np.isfinite(sol)):
                delta_w = max(1e-8, 10.0 * (delta_w or 1e-8))
                continue

            dz = sol[:n]
            dy = sol[n:] if me else np.zeros(0)
            if mi:
                ds = -(ci + s) - Ji @ dz
                dw = sigma * (ci + s) + mu / s_safe - w + sigma * (Ji @ dz)
            else:
                ds = np.zeros(0)
                dw = np.zeros(0)
            dzeta_lo = np.where(has_lb,
                                mu / np.maximum(z - lb, 1e-300) - zeta_lo
                                - d_lo_scale(zeta_lo, z, lb, has_lb) * dz, 0.0)
            dzeta_up = np.where(has_ub,
                                mu / np.maximum(ub - z, 1e-300) - zeta_up
                                + d_up_scale(zeta_up, z, ub, has_ub) * dz, 0.0)

            # fraction-to-boundary
            tau = max(0.99, 1.0 - mu)
            alpha_pri = _max_step(s, ds, tau) if mi else 1.0
            alpha_pri = min(alpha_pri,
                            _max_step((z - lb)[has_lb], dz[has_lb], tau),
                            _max_step((ub - z)[has_ub], -dz[has_ub], tau))
            alpha_dual = min(_max_step(w, dw, tau) if mi else 1.0,
                             _max_step(zeta_lo[has_lb], dzeta_lo[has_lb], tau),
                             _max_step(zeta_up[has_ub], dzeta_up[has_ub], tau))

            # backtracking on a barrier + L1-penalty merit function
            nu_pen = 10.0 + 2.0 * max(
                float(np.max(np.abs(y))) if me else 0.0,
                float(np.max(np.abs(w))) if mi else 0.0)
            phi0 = _merit(f_val, z, s, ce, ci, lb, ub, has_lb, has_ub, mu, nu_pen)
            alpha = alpha_pri
            ls_ok = False
            for _ls in range(25):
                z_t = z + alpha * dz
                s_t = s + alpha * ds
                try:
                    f_t = eval_f(z_t)
                    ce_t = eval_ce(z_t)
                    ci_t = eval_ci(z_t)
                except CallbackFailure:
                    alpha *= 0.5
                    continue
                phi_t = _merit(f_t, z_t, s_t, ce_t, ci_t, lb, ub, has_lb, has_ub, mu, nu_pen)
                if phi_t <= phi0 - 1e-8 * alpha * max(1.0, abs(phi0)) or \
                        phi_t <= phi0 + 1e-12 * max(1.0, abs(phi0)):
                    ls_ok = True
                    break
                alpha *= 0.5
            if not ls_ok:
                delta_w = max(1e-6, 10.0 * (delta_w or 1e-6))
                continue

            z = z_t
            s = s_t if mi else s
            y = y + alpha_dual * dy if me else y
            w = np.maximum(w + alpha_dual * dw, 1e-16) if mi else w
            zeta_lo = np.where(has_lb, np.maximum(zeta_lo + alpha_dual * dzeta_lo, 1e-16), 0.0)
            zeta_up = np.where(has_ub, np.maximum(zeta_up + alpha_dual * dzeta_up, 1e-16), 0.0)
            f_val, ce, ci = f_t, ce_t, ci_t
            g = eval_g(z)
            Je = eval_Je(z)
            Ji = eval_Ji(z)
            delta_w = max(delta_w / 3.0, 0.0) if delta_w > 1e-10 else 0.0
            accepted = True
            if opts.log_iterations:
                iteration_log.append({
                    "iteration": it,
                    "objective": f_val,
                    "constraint_violation": violation(ce, ci),
                    "step_size": alpha,
                    "mu": mu,
                    "merit": phi_t,
                })
            break

        if not accepted:
            # could not find an acceptable step even with heavy regularization
            no_step = True
            break

    wall = time.perf_counter() - t_start
    final_violation = violation(ce, ci)
    final_err = kkt_error(g, Je, Ji, ce, ci, s, w, zeta_lo, zeta_up, 0.0)
    if status is not SolveStatus.OPTIMAL and status is not SolveStatus.INFEASIBLE:
        if final_err < opts.tol:
            status = SolveStatus.OPTIMAL
        elif final_violation < opts.tol:
            status = SolveStatus.FEASIBLE_POINT
        elif final_violation > max(100 * opts.tol, 1e-5) and (mu <= 1e-4 or no_step):
            status = SolveStatus.INFEASIBLE
        else:
            status = SolveStatus.ITER_LIMIT

    return SolveResult(
        z=z,
        objective=f_val,
        status=status,
        iterations=it,
        wall_time=wall,
        kkt_error=final_err,
        constraint_violation=final_violation,
        y_eq=y,
        w_ineq=w,
        iteration_log=iteration_log,
    )


def d_lo_scale(zeta_lo, z, lb, has_lb):
    out = np.zeros_like(z)
    out[has_lb] = zeta_lo[has_lb] / (z - lb)[has_lb]
    return out


def d_up_scale(zeta_up, z, ub, has_ub):
    out = np.zeros_like(z)
    out[has_ub] = zeta_up[has_ub] / (ub - z)[has_ub]
    return out


def _max_step(x, dx, tau):
    """Largest alpha in (0, 1] keeping x + alpha*dx >= (1 - tau) * x."""
    if len(x) == 0:
        return 1.0
    neg = dx < 0
    if not np.any(neg):
        return 1.0
    with np.errstate(divide="ignore", over="ignore"):
        ratio = -tau * x[neg] / dx[neg]
    return float(min(1.0, np.min(ratio)))


def _merit(f, z, s, ce, ci, lb, ub, has_lb, has_ub, mu, nu_pen):
    phi = f
    if len(s):
        if np.any(s <= 0):
            return np.inf
        phi -= mu * float(np.sum(np.log(s)))
    if np.any(has_lb):
        gap = (z - lb)[has_lb]
        if np.any(gap <= 0):
            return np.inf
        phi -= mu * float(np.sum(np.log(gap)))
    if np.any(has_ub):
        gap = (ub - z)[has_ub]
        if np.any(gap <= 0):
            return np.inf
        phi -= mu * float(np.sum(np.log(gap)))
    if len(ce):
        phi += nu_pen * float(np.sum(np.abs(ce)))
    if len(s):
        phi += nu_pen * float(np.sum(np.abs(ci + s)))
    return phi
