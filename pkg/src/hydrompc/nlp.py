"""Sparse nonlinear programming for the controller and estimator problems.

The problem class is deliberately narrow: an objective supplied as value /
gradient / positive-semidefinite Hessian-approximation evaluators, nonlinear
equality constraints with an analytic Jacobian, a linear inequality system
and simple bounds.  Problems of this shape are solved by sequential quadratic
programming with an exact l1 merit line search; each QP subproblem is solved
by a Mehrotra predictor-corrector interior-point method on the sparse KKT
system.

Everything is deterministic: identical problems and configuration give
bit-identical solutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .plant import DomainError

__all__ = [
    "NlpProblem",
    "NlpSolution",
    "SolverConfig",
    "solve",
    "check_derivatives",
    "DerivativeReport",
]

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]
Hessian = Callable[[np.ndarray], sp.spmatrix | np.ndarray]
Equalities = Callable[[np.ndarray], tuple[np.ndarray, sp.spmatrix | np.ndarray]]


@dataclass
class NlpProblem:
    """A sparse NLP with quadratic-like objective and shooting equalities.

    ``objective(z)`` returns ``(value, gradient)``; ``hessian(z)`` returns a
    positive-semidefinite approximation of the objective curvature;
    ``equalities(z)`` returns the residual vector and its Jacobian.  The
    linear inequality system reads ``ineq_matrix @ z <= ineq_rhs``.  ``layout``
    is an arbitrary descriptor of the decision-variable blocks carried along
    for diagnostics.
    """

    n: int
    objective: Objective
    hessian: Hessian
    equalities: Equalities | None = None
    n_eq: int = 0
    ineq_matrix: sp.spmatrix | np.ndarray | None = None
    ineq_rhs: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    x0: np.ndarray | None = None
    layout: object = None

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lb = np.full(self.n, -np.inf) if self.lower is None else np.asarray(self.lower, float)
        ub = np.full(self.n, np.inf) if self.upper is None else np.asarray(self.upper, float)
        if np.any(lb > ub):
            raise ValueError("infeasible bound specification: lower > upper")
        return lb, ub


@dataclass
class NlpSolution:
    """Result of one :func:`solve` call."""

    x: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    status: str  # converged | max-iterations | infeasible-subproblem
    eq_multipliers: np.ndarray
    ineq_multipliers: np.ndarray
    message: str = ""
    history: list[dict] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


@dataclass(frozen=True)
class SolverConfig:
    kkt_tol: float = 1e-6
    feas_tol: float = 1e-8
    max_iterations: int = 60
    qp_max_iterations: int = 80
    armijo: float = 1e-4
    log_path: str | None = None


# ---------------------------------------------------------------------------
# QP subproblem
# ---------------------------------------------------------------------------

def _solve_kkt(h_mat: sp.csc_matrix, e_mat: sp.csc_matrix | None,
               reg: float):
    """LU factorization of the (regularized) symmetric KKT matrix."""
    n = h_mat.shape[0]
    h_reg = h_mat + reg * sp.identity(n, format="csc")
    if e_mat is None or e_mat.shape[0] == 0:
        return splu(h_reg.tocsc())
    me = e_mat.shape[0]
    kkt = sp.bmat([[h_reg, e_mat.T],
                   [e_mat, -1e-12 * sp.identity(me)]], format="csc")
    return splu(kkt)


def _qp_solve(h_mat, g_vec, e_mat, e_rhs, c_mat, c_rhs, max_iter: int
              ) -> tuple[np.ndarray, np.ndarray, np.ndarray, bool]:
    """Solve ``min 1/2 d'Hd + g'd  s.t.  Ed = e, Cd <= c``.

    Returns ``(d, eq_multipliers, ineq_multipliers, ok)``.  ``H`` must be
    positive semidefinite; a small fixed regularization keeps the KKT system
    factorizable when it is merely semidefinite.
    """
    n = g_vec.size
    h_mat = sp.csc_matrix(h_mat)
    me = 0 if e_mat is None else e_mat.shape[0]
    mi = 0 if c_mat is None else c_mat.shape[0]
    if me:
        e_mat = sp.csc_matrix(e_mat)

    scale = 1.0 + float(np.abs(g_vec).max(initial=0.0))
    reg0 = 1e-10 * scale

    if mi == 0:
        for attempt in range(5):
            try:
                lu = _solve_kkt(h_mat, e_mat if me else None, reg0 * 10 ** attempt)
                rhs = -g_vec if me == 0 else np.concatenate([-g_vec, e_rhs])
                sol = lu.solve(rhs)
            except RuntimeError:
                continue
            if not np.all(np.isfinite(sol)):
                continue
            d = sol[:n]
            lam = sol[n:] if me else np.zeros(0)
            return d, lam, np.zeros(0), True
        return np.zeros(n), np.zeros(me), np.zeros(0), False

    c_mat = sp.csc_matrix(c_mat)
    d = np.zeros(n)
    lam = np.zeros(me)
    s = np.maximum(c_rhs, 1.0)
    mu = np.ones(mi)

    tol = 1e-11 * scale
    for _ in range(max_iter):
        r_d = h_mat @ d + g_vec + (e_mat.T @ lam if me else 0.0) + c_mat.T @ mu
        r_e = (e_mat @ d - e_rhs) if me else np.zeros(0)
        r_c = c_mat @ d + s - c_rhs
        gap = float(mu @ s) / mi

        if (np.abs(r_d).max() <= tol and (me == 0 or np.abs(r_e).max() <= tol)
                and np.abs(r_c).max() <= tol and gap <= tol):
            return d, lam, mu, True

        mu_over_s = mu / s
        h_aug = h_mat + c_mat.T @ sp.diags(mu_over_s) @ c_mat
        lu = None
        for attempt in range(5):
            try:
                lu = _solve_kkt(sp.csc_matrix(h_aug), e_mat if me else None,
                                reg0 * 10 ** attempt)
                break
            except RuntimeError:
                lu = None
        if lu is None:
            return d, lam, mu, False

        def newton_step(comp_rhs: np.ndarray) -> tuple[np.ndarray, ...]:
            rhs_d = -r_d - c_mat.T @ ((comp_rhs + mu * r_c) / s)
            rhs = rhs_d if me == 0 else np.concatenate([rhs_d, -r_e])
            sol = lu.solve(rhs)
            dd = sol[:n]
            dlam = sol[n:] if me else np.zeros(0)
            ds = -r_c - c_mat @ dd
            dmu = (comp_rhs - mu * ds) / s
            return dd, dlam, ds, dmu

        # Predictor (affine) step.
        dd_a, dlam_a, ds_a, dmu_a = newton_step(-mu * s)
        alpha_a = _step_to_boundary(s, ds_a, mu, dmu_a)
        gap_aff = float((mu + alpha_a * dmu_a) @ (s + alpha_a * ds_a)) / mi
        sigma = min(1.0, max(gap_aff / gap, 0.0) ** 3)

        # Corrector step reuses the factorization.
        comp = -mu * s - ds_a * dmu_a + sigma * gap
        dd, dlam, ds, dmu = newton_step(comp)
        alpha = 0.995 * _step_to_boundary(s, ds, mu, dmu)
        alpha = min(1.0, alpha)

        d += alpha * dd
        lam += alpha * dlam
        s += alpha * ds
        mu += alpha * dmu

        if not (np.all(np.isfinite(d)) and np.all(s > 0) and np.all(mu > 0)):
            return d, lam, mu, False

    return d, lam, mu, False


def _step_to_boundary(s: np.ndarray, ds: np.ndarray,
                      mu: np.ndarray, dmu: np.ndarray) -> float:
    alpha = 1.0
    neg = ds < 0
    if np.any(neg):
        alpha = min(alpha, float(np.min(-s[neg] / ds[neg])))
    neg = dmu < 0
    if np.any(neg):
        alpha = min(alpha, float(np.min(-mu[neg] / dmu[neg])))
    return alpha


# ---------------------------------------------------------------------------
# SQP driver
# ---------------------------------------------------------------------------

def _full_inequalities(problem: NlpProblem
                       ) -> tuple[sp.csc_matrix | None, np.ndarray | None]:
    """Stack the linear inequalities and the finite simple bounds."""
    lb, ub = problem.bounds()
    rows = []
    rhs = []
    if problem.ineq_matrix is not None and problem.ineq_rhs is not None \
            and np.size(problem.ineq_rhs) > 0:
        rows.append(sp.csc_matrix(problem.ineq_matrix))
        rhs.append(np.asarray(problem.ineq_rhs, float))
    fin_ub = np.where(np.isfinite(ub))[0]
    if fin_ub.size:
        mat = sp.csc_matrix((np.ones(fin_ub.size), (np.arange(fin_ub.size), fin_ub)),
                            shape=(fin_ub.size, problem.n))
        rows.append(mat)
        rhs.append(ub[fin_ub])
    fin_lb = np.where(np.isfinite(lb))[0]
    if fin_lb.size:
        mat = sp.csc_matrix((-np.ones(fin_lb.size), (np.arange(fin_lb.size), fin_lb)),
                            shape=(fin_lb.size, problem.n))
        rows.append(mat)
        rhs.append(-lb[fin_lb])
    if not rows:
        return None, None
    return sp.vstack(rows, format="csc"), np.concatenate(rhs)


def _merit(problem: NlpProblem, c_full, c_rhs, z: np.ndarray, nu: float) -> float:
    f, _ = problem.objective(z)
    penalty = 0.0
    if problem.equalities is not None:
        c_eq, _ = problem.equalities(z)
        penalty += float(np.abs(c_eq).sum())
    if c_full is not None:
        viol = c_full @ z - c_rhs
        penalty += float(np.clip(viol, 0.0, None).sum())
    return f + nu * penalty


def solve(problem: NlpProblem, config: SolverConfig | None = None) -> NlpSolution:
    """Solve the NLP by line-search SQP.

    On convergence, stationarity and complementarity are below
    ``config.kkt_tol`` and the equality/inequality infeasibilities are below
    ``config.feas_tol``.  On iteration exhaustion or a failed QP subproblem
    the best iterate found so far is returned with the status flagged.
    """
    cfg = config or SolverConfig()
    lb, ub = problem.bounds()
    if problem.x0 is None:
        z = np.clip(np.zeros(problem.n), lb, ub)
    else:
        z = np.clip(np.asarray(problem.x0, float), lb, ub)

    c_full, c_rhs = _full_inequalities(problem)
    mi = 0 if c_full is None else c_full.shape[0]

    lam = np.zeros(problem.n_eq)
    mu = np.zeros(mi)
    nu = 1.0
    history: list[dict] = []
    status = "max-iterations"
    message = ""
    iterations = 0
    kkt_res = np.inf

    log_lines: list[str] = []

    for it in range(cfg.max_iterations):
        f_val, grad = problem.objective(z)
        if problem.equalities is not None:
            c_eq, j_eq = problem.equalities(z)
            j_eq = sp.csc_matrix(j_eq)
        else:
            c_eq, j_eq = np.zeros(0), None

        # KKT residuals with the current multiplier estimates.
        stat_vec = grad.copy()
        if j_eq is not None:
            stat_vec += j_eq.T @ lam
        if mi:
            stat_vec += c_full.T @ mu
            ineq_gap = c_full @ z - c_rhs
            feas_in = float(np.clip(ineq_gap, 0.0, None).max(initial=0.0))
            comp = float(np.abs(mu * ineq_gap).max(initial=0.0))
        else:
            feas_in = 0.0
            comp = 0.0
        stat = float(np.abs(stat_vec).max(initial=0.0))
        feas_eq = float(np.abs(c_eq).max(initial=0.0))
        kkt_res = max(stat, comp, feas_eq, feas_in)

        if stat <= cfg.kkt_tol and comp <= cfg.kkt_tol \
                and feas_eq <= cfg.feas_tol and feas_in <= cfg.feas_tol:
            status = "converged"
            break

        h_mat = problem.hessian(z)
        d, lam_new, mu_new, ok = _qp_solve(
            h_mat, grad,
            j_eq, -c_eq if j_eq is not None else None,
            c_full, (c_rhs - c_full @ z) if mi else None,
            cfg.qp_max_iterations)
        if not ok:
            status = "infeasible-subproblem"
            message = "QP subproblem did not converge"
            break

        lam, mu = lam_new, mu_new
        mult_norm = max(
            float(np.abs(lam).max(initial=0.0)),
            float(np.abs(mu).max(initial=0.0)))
        nu = max(nu, 1.1 * mult_norm + 0.1)

        penalty0 = float(np.abs(c_eq).sum())
        if mi:
            penalty0 += float(np.clip(c_full @ z - c_rhs, 0.0, None).sum())
        merit0 = f_val + nu * penalty0
        descent = float(grad @ d) - nu * penalty0

        alpha = 1.0
        step_scale = float(np.abs(d).max(initial=0.0))
        if step_scale <= 1e-12 * (1.0 + float(np.abs(z).max(initial=0.0))):
            # The QP step is below float resolution of the iterate; any merit
            # change is unmeasurable.  Accept it so the next KKT check runs
            # with the fresh multiplier estimates.
            merit_trial = merit0
            accepted = True
        else:
            accepted = False
            for _ in range(40):
                try:
                    merit_trial = _merit(problem, c_full, c_rhs, z + alpha * d, nu)
                except DomainError:
                    merit_trial = np.inf
                if merit_trial <= merit0 + cfg.armijo * alpha * descent:
                    accepted = True
                    break
                alpha *= 0.5
        if not accepted:
            status = "max-iterations"
            message = "line search failed to make progress"
            break

        z = z + alpha * d
        iterations = it + 1
        step_norm = float(np.abs(alpha * d).max(initial=0.0))
        history.append({"iteration": iterations, "objective": f_val,
                        "merit": merit_trial, "kkt": kkt_res,
                        "step_norm": step_norm, "alpha": alpha})
        log_lines.append(
            f"{iterations:4d}  obj={f_val: .12e}  kkt={kkt_res: .3e}  "
            f"step={step_norm: .3e}  alpha={alpha:.3f}")

    if cfg.log_path is not None:
        with open(cfg.log_path, "a", encoding="utf-8") as fh:
            fh.write("\n".join(log_lines) + ("\n" if log_lines else ""))

    z = np.clip(z, lb, ub)
    f_val, _ = problem.objective(z)
    return NlpSolution(x=z, objective=float(f_val), kkt_residual=float(kkt_res),
                       iterations=iterations, status=status,
                       eq_multipliers=lam, ineq_multipliers=mu,
                       message=message, history=history)


# ---------------------------------------------------------------------------
# Finite-difference derivative checking (the verification oracle)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DerivativeReport:
    max_gradient_error: float
    max_jacobian_error: float
    worst_gradient_index: int
    worst_jacobian_entry: tuple[int, int]

    @property
    def max_error(self) -> float:
        return max(self.max_gradient_error, self.max_jacobian_error)


def check_derivatives(problem: NlpProblem, point: np.ndarray,
                      step: float = 1e-5) -> DerivativeReport:
    """Compare analytic derivatives with central finite differences.

    Reports the worst relative error over the objective gradient and the
    equality-constraint Jacobian at ``point``.
    """
    z = np.asarray(point, float)
    _, grad = problem.objective(z)

    def rel(a: float, b: float) -> float:
        return abs(a - b) / max(1.0, abs(a), abs(b))

    worst_g, worst_gi = 0.0, -1
    for i in range(problem.n):
        h = step * max(1.0, abs(z[i]))
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        fd = (problem.objective(zp)[0] - problem.objective(zm)[0]) / (2.0 * h)
        err = rel(float(grad[i]), fd)
        if err > worst_g:
            worst_g, worst_gi = err, i

    worst_j, worst_je = 0.0, (-1, -1)
    if problem.equalities is not None:
        _, j_eq = problem.equalities(z)
        j_eq = sp.csc_matrix(j_eq).toarray()
        for i in range(problem.n):
            h = step * max(1.0, abs(z[i]))
            zp, zm = z.copy(), z.copy()
            zp[i] += h
            zm[i] -= h
            col = (problem.equalities(zp)[0] - problem.equalities(zm)[0]) / (2.0 * h)
            diffs = np.abs(j_eq[:, i] - col) / np.maximum(
                1.0, np.maximum(np.abs(j_eq[:, i]), np.abs(col)))
            k = int(np.argmax(diffs))
            if diffs[k] > worst_j:
                worst_j, worst_je = float(diffs[k]), (k, i)

    return DerivativeReport(max_gradient_error=worst_g,
                            max_jacobian_error=worst_j,
                            worst_gradient_index=worst_gi,
                            worst_jacobian_entry=worst_je)
