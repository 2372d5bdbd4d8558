import numpy as np
import pytest
import scipy.sparse as sp

from hydrompc.nlp import (
    DerivativeReport,
    NlpProblem,
    SolverConfig,
    check_derivatives,
    solve,
)


def quadratic_problem(h_mat, g_vec, **kw):
    h_mat = np.asarray(h_mat, float)
    g_vec = np.asarray(g_vec, float)

    def objective(z):
        return 0.5 * float(z @ h_mat @ z) + float(g_vec @ z), h_mat @ z + g_vec

    return NlpProblem(n=g_vec.size, objective=objective,
                      hessian=lambda z: sp.csc_matrix(h_mat), **kw)


class TestUnconstrainedQuadratic:
    def test_one_iteration_to_exact_minimizer(self):
        h_mat = np.array([[4.0, 1.0], [1.0, 3.0]])
        g_vec = np.array([1.0, -2.0])
        prob = quadratic_problem(h_mat, g_vec, x0=np.array([25.0, -13.0]))
        sol = solve(prob)
        assert sol.status == "converged"
        assert sol.iterations == 1
        z_star = np.linalg.solve(h_mat, -g_vec)
        assert np.abs(sol.x - z_star).max() < 1e-7
        assert sol.kkt_residual <= 1e-6


class TestBoundConstrained:
    def test_kkt_point_by_hand(self):
        # min x^2 subject to x >= 1: minimizer 1, bound multiplier 2.
        prob = quadratic_problem(np.array([[2.0]]), np.array([0.0]),
                                 lower=np.array([1.0]), x0=np.array([4.0]))
        sol = solve(prob)
        assert sol.status == "converged"
        assert sol.x[0] == pytest.approx(1.0, abs=1e-9)
        assert sol.ineq_multipliers[0] == pytest.approx(2.0, abs=1e-6)
        assert sol.kkt_residual <= 1e-6


class TestEqualityConstrained:
    @staticmethod
    def _rosenbrock_problem(x0):
        def objective(z):
            r = np.array([10.0 * (z[1] - z[0] ** 2), 1.0 - z[0]])
            jac = np.array([[-20.0 * z[0], 10.0], [-1.0, 0.0]])
            return float(r @ r), 2.0 * jac.T @ r

        def hessian(z):
            jac = np.array([[-20.0 * z[0], 10.0], [-1.0, 0.0]])
            return sp.csc_matrix(2.0 * jac.T @ jac)

        def equalities(z):
            return (np.array([z[0] ** 2 + z[1] ** 2 - 1.0]),
                    sp.csc_matrix(np.array([[2.0 * z[0], 2.0 * z[1]]])))

        return NlpProblem(n=2, objective=objective, hessian=hessian,
                          equalities=equalities, n_eq=1, x0=x0)

    def test_matches_grid_search_on_unit_circle(self):
        sol = solve(self._rosenbrock_problem(np.array([0.7, 0.7])))
        assert sol.status == "converged"
        assert sol.kkt_residual <= 1e-6
        # Brute-force oracle over the circle angle.
        theta = np.linspace(0.0, 2.0 * np.pi, 700_000, endpoint=False)
        vals = (1 - np.cos(theta)) ** 2 + 100.0 * (np.sin(theta) - np.cos(theta) ** 2) ** 2
        best = theta[np.argmin(vals)]
        z_grid = np.array([np.cos(best), np.sin(best)])
        assert np.abs(sol.x - z_grid).max() < 1e-4

    def test_merit_decreases_monotonically(self):
        sol = solve(self._rosenbrock_problem(np.array([-0.4, 0.9])))
        merits = [h["merit"] for h in sol.history]
        assert all(b <= a + 1e-12 for a, b in zip(merits, merits[1:]))

    def test_deterministic(self):
        a = solve(self._rosenbrock_problem(np.array([0.7, 0.7])))
        b = solve(self._rosenbrock_problem(np.array([0.7, 0.7])))
        assert np.array_equal(a.x, b.x)
        assert a.iterations == b.iterations


class TestSlackBehavior:
    def test_inactive_constraint_leaves_slack_at_zero(self):
        # min x^2 + 50*eps^2 with x - eps <= 5 (inactive), eps >= 0.
        h_mat = np.diag([2.0, 100.0])
        prob = quadratic_problem(
            h_mat, np.zeros(2),
            ineq_matrix=np.array([[1.0, -1.0]]), ineq_rhs=np.array([5.0]),
            lower=np.array([-np.inf, 0.0]), x0=np.array([3.0, 1.0]))
        sol = solve(prob)
        assert sol.status == "converged"
        assert sol.x[1] >= -1e-12
        assert sol.x[1] <= 1e-4  # zero up to interior-point residue
        # Complementarity on the (inactive) linear row: its multiplier
        # vanishes with the 5-unit gap.
        gap = float((prob.ineq_matrix @ sol.x - prob.ineq_rhs)[0])
        assert abs(sol.ineq_multipliers[0] * gap) <= 1e-6

    def test_active_constraint_fills_slack(self):
        # min (x-8)^2 + 50*eps^2 with x - eps <= 5: violation is shared
        # between backing off x and paying for slack.
        def objective(z):
            g = np.array([2.0 * (z[0] - 8.0), 100.0 * z[1]])
            return float((z[0] - 8.0) ** 2 + 50.0 * z[1] ** 2), g

        prob = NlpProblem(n=2, objective=objective,
                          hessian=lambda z: sp.csc_matrix(np.diag([2.0, 100.0])),
                          ineq_matrix=np.array([[1.0, -1.0]]),
                          ineq_rhs=np.array([5.0]),
                          lower=np.array([-np.inf, 0.0]),
                          x0=np.array([0.0, 0.0]))
        sol = solve(prob)
        assert sol.status == "converged"
        # KKT by hand: x = 8 - mu/2, eps = mu/100, x - eps = 5 -> mu = 300/51.
        mu = 300.0 / 51.0
        assert sol.x[0] == pytest.approx(8.0 - mu / 2.0, abs=1e-6)
        assert sol.x[1] == pytest.approx(mu / 100.0, abs=1e-6)


class TestCheckDerivatives:
    def test_linear_objective_is_machine_exact(self):
        c = np.array([1.5, -2.0, 0.25])
        prob = NlpProblem(n=3, objective=lambda z: (float(c @ z), c.copy()),
                          hessian=lambda z: sp.csc_matrix((3, 3)),
                          x0=np.zeros(3))
        rep = check_derivatives(prob, np.array([0.3, -0.7, 2.0]))
        assert rep.max_gradient_error < 1e-9
        assert rep.max_jacobian_error == 0.0

    def test_flags_wrong_gradient(self):
        def objective(z):
            return float(z @ z), 2.0 * z + 0.05  # deliberately wrong

        prob = NlpProblem(n=2, objective=objective,
                          hessian=lambda z: sp.csc_matrix(2.0 * np.eye(2)),
                          x0=np.zeros(2))
        rep = check_derivatives(prob, np.array([1.0, -1.0]))
        assert rep.max_gradient_error > 1e-3


class TestRobustness:
    def test_infeasible_bounds_rejected(self):
        prob = quadratic_problem(np.eye(2), np.zeros(2),
                                 lower=np.array([1.0, 0.0]),
                                 upper=np.array([0.0, 1.0]))
        with pytest.raises(ValueError):
            solve(prob)

    def test_projects_initial_guess_into_bounds(self):
        prob = quadratic_problem(np.array([[2.0]]), np.array([-8.0]),
                                 lower=np.array([0.0]), upper=np.array([1.0]),
                                 x0=np.array([99.0]))
        sol = solve(prob)
        assert sol.status == "converged"
        assert sol.x[0] == pytest.approx(1.0, abs=1e-9)
