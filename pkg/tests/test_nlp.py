import numpy as np
import pytest

from tube_nmpc.errors import InconsistentBounds
from tube_nmpc.nlp import (LinearRanges, NlpProblem, OcpSpec, SlackConfig,
                           kkt_residual, solve, transcribe)

INF = np.inf


def quad_problem(q, b, lb, ub, a_eq=None, rhs_eq=None, lin=None):
    """min 0.5 v'Qv + b'v subject to A_eq v = rhs_eq, boxes and ranges."""
    q = np.asarray(q, float)
    b = np.asarray(b, float)
    n = len(b)

    def cost(v):
        return 0.5 * v @ q @ v + b @ v, q @ v + b

    if a_eq is None:
        def eq(v):
            return np.zeros(0), np.zeros((0, n))
    else:
        a = np.asarray(a_eq, float)
        r = np.asarray(rhs_eq, float)

        def eq(v):
            return a @ v - r, a

    return NlpProblem(n_vars=n, cost=cost, eq_constraints=eq,
                      var_bounds=(np.asarray(lb, float), np.asarray(ub, float)),
                      var_layout={"all": slice(0, n)}, lin_ineq=lin,
                      cost_hess=lambda v: q)


class TestHandWorkedSolutions:
    def test_equality_constrained_quadratic(self):
        """min (x-3)^2 + (y+1)^2 s.t. x + y = 1.

        Stationarity gives x - 3 = y + 1, so x = 2.5, y = -1.5, lam = 1."""
        p = quad_problem(2 * np.eye(2), [-6.0, 2.0], [-INF, -INF], [INF, INF],
                         a_eq=[[1.0, 1.0]], rhs_eq=[1.0])
        sol = solve(p, warm_start=np.zeros(2), tol=1e-9)
        assert sol.status == "converged"
        np.testing.assert_allclose(sol.v_star, [2.5, -1.5], atol=1e-7)
        np.testing.assert_allclose(sol.lam_eq, [1.0], atol=1e-6)
        # objective value (x-3)^2 + (y+1)^2 at the optimum, minus constants
        assert sol.cost_star + 10.0 == pytest.approx(0.5, abs=1e-7)

    def test_active_box_bound(self):
        """min (x-2)^2 with x <= 1 pins x at the bound."""
        p = quad_problem([[2.0]], [-4.0], [-INF], [1.0])
        sol = solve(p, warm_start=np.array([-3.0]), tol=1e-9)
        assert sol.status == "converged"
        assert sol.v_star[0] == pytest.approx(1.0, abs=1e-8)

    def test_active_range_row(self):
        """min x^2 + y^2 s.t. 1 <= x + y <= 2: symmetric optimum on the lower
        edge, x = y = 0.5, range multiplier -1."""
        lin = LinearRanges(np.array([[1.0, 1.0]]), np.array([1.0]),
                           np.array([2.0]))
        p = quad_problem(2 * np.eye(2), [0.0, 0.0], [-INF, -INF], [INF, INF],
                         lin=lin)
        sol = solve(p, warm_start=np.array([2.0, 2.0]), tol=1e-9)
        assert sol.status == "converged"
        np.testing.assert_allclose(sol.v_star, [0.5, 0.5], atol=1e-7)
        np.testing.assert_allclose(sol.lam_ineq, [-1.0], atol=1e-6)
        assert sol.cost_star == pytest.approx(0.5, abs=1e-7)

    def test_nonconvex_curved_constraint(self):
        """min (x-2)^2 + y^2 s.t. x^2 + y^2 = 1: closest point on the unit
        circle to (2, 0) is (1, 0)."""
        def cost(v):
            g = np.array([2 * (v[0] - 2), 2 * v[1]])
            return (v[0] - 2) ** 2 + v[1] ** 2, g

        def eq(v):
            return (np.array([v[0] ** 2 + v[1] ** 2 - 1.0]),
                    np.array([[2 * v[0], 2 * v[1]]]))

        p = NlpProblem(n_vars=2, cost=cost, eq_constraints=eq,
                       var_bounds=(np.array([-INF, -INF]),
                                   np.array([INF, INF])),
                       var_layout={"all": slice(0, 2)})
        sol = solve(p, warm_start=np.array([0.5, 0.3]), tol=1e-9)
        assert sol.status == "converged"
        np.testing.assert_allclose(sol.v_star, [1.0, 0.0], atol=1e-6)


class TestSolverBehaviour:
    def test_kkt_residual_certifies_solution(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((4, 4))
        q = a @ a.T + 4 * np.eye(4)
        p = quad_problem(q, rng.standard_normal(4), -np.ones(4), np.ones(4),
                         a_eq=rng.standard_normal((2, 4)), rhs_eq=[0.1, -0.2])
        sol = solve(p, warm_start=np.zeros(4), tol=1e-8)
        assert sol.status == "converged"
        res = kkt_residual(p, sol.v_star, {"eq": sol.lam_eq})
        assert res <= 1e-6

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        q = 2 * np.eye(3)
        b = rng.standard_normal(3)
        p = quad_problem(q, b, -np.ones(3), np.ones(3),
                         a_eq=[[1.0, 1.0, 1.0]], rhs_eq=[0.5])
        s1 = solve(p, warm_start=np.zeros(3), tol=1e-9)
        s2 = solve(p, warm_start=np.zeros(3), tol=1e-9)
        assert np.array_equal(s1.v_star, s2.v_star)
        assert s1.cost_star == s2.cost_star
        assert s1.iterations == s2.iterations

    def test_max_iter_status(self):
        def cost(v):
            r = v[1] - v[0] ** 2
            g = np.array([-400 * v[0] * r - 2 * (1 - v[0]), 200 * r])
            return 100 * r * r + (1 - v[0]) ** 2, g

        def eq(v):
            return np.zeros(0), np.zeros((0, 2))

        p = NlpProblem(n_vars=2, cost=cost, eq_constraints=eq,
                       var_bounds=(np.full(2, -INF), np.full(2, INF)),
                       var_layout={"all": slice(0, 2)})
        sol = solve(p, warm_start=np.array([-1.2, 1.0]), tol=1e-12, max_iter=3)
        assert sol.status == "max_iter"
        assert sol.iterations >= 3

    def test_infeasible_detected(self):
        # x = 0 and x = 1 cannot both hold
        p = quad_problem([[2.0]], [0.0], [-INF], [INF],
                         a_eq=[[1.0], [1.0]], rhs_eq=[0.0, 1.0])
        sol = solve(p, warm_start=np.zeros(1), tol=1e-9, max_iter=100000)
        assert sol.status == "infeasible"

    def test_inconsistent_bounds_rejected(self):
        with pytest.raises(InconsistentBounds):
            quad_problem([[2.0]], [0.0], [1.0], [-1.0])

    def test_warm_start_clipped_into_box(self):
        p = quad_problem([[2.0]], [-4.0], [0.0], [1.0])
        sol = solve(p, warm_start=np.array([50.0]), tol=1e-9)
        assert sol.status == "converged"
        assert sol.v_star[0] == pytest.approx(1.0, abs=1e-8)

    def test_warm_start_shape_checked(self):
        p = quad_problem([[2.0]], [0.0], [-INF], [INF])
        with pytest.raises(ValueError):
            solve(p, warm_start=np.zeros(3))


# ---------------------------------------------------------------------------
# transcription


class LinearStepper:
    """x_next = A x + B u: exact sensitivities for transcription tests."""

    def __init__(self, a, b):
        self.a = np.asarray(a, float)
        self.b = np.asarray(b, float)
        self.n = self.a.shape[0]
        self.mc = self.b.shape[1]

    def step(self, k, x, u):
        return self.a @ x + self.b @ u, self.a.copy(), self.b.copy()


class QuadCost:
    """0.5 sum |x_k - x_ref|^2 + 0.5 r sum |u_k|^2 over nodes 1..Hp."""

    def __init__(self, x_ref, r=0.1):
        self.x_ref = np.asarray(x_ref, float)
        self.r = r

    def evaluate(self, xs, us, z0):
        e = xs[1:] - self.x_ref
        j = 0.5 * float(np.sum(e * e)) + 0.5 * self.r * float(np.sum(us * us))
        gx = np.zeros_like(xs)
        gx[1:] = e
        return j, gx, self.r * us, None


def small_ocp(hp=4, hc=2, slacks=False, extra_dof=False, seed=0):
    rng = np.random.default_rng(seed)
    n, mc = 3, 1
    a = 0.9 * np.eye(n) + 0.05 * rng.standard_normal((n, n))
    b = rng.standard_normal((n, mc))
    sc = None
    if slacks:
        sc = SlackConfig(indices=[0], soft_lb=[-0.5], soft_ub=[0.5],
                         weight=10.0)
    return OcpSpec(
        horizon=hp, control_horizon=hc, interval=0.25,
        dynamics=LinearStepper(a, b), x0=rng.standard_normal(n),
        cost=QuadCost(np.zeros(n)),
        state_bounds=(np.full(n, -10.0), np.full(n, 10.0)),
        input_bounds=(np.array([-2.0]), np.array([2.0])),
        delta_input_bounds=(np.array([-0.5]), np.array([0.5])),
        u_prev=np.array([0.3]), slack_config=sc,
        extra_initial_state_dof=extra_dof)


class TestTranscription:
    def test_variable_layout_arithmetic(self):
        p = transcribe(small_ocp(hp=4, hc=2))
        assert p.n_vars == 2 * 1 + 4 * 3
        assert p.var_layout["controls"] == slice(0, 2)
        assert p.var_layout["states"] == slice(2, 14)

    def test_layout_with_slacks_and_extra_dof(self):
        p = transcribe(small_ocp(hp=4, hc=2, slacks=True, extra_dof=True))
        assert p.n_vars == 2 + 12 + 4 * 1 + 3
        assert p.var_layout["slacks"] == slice(14, 18)
        assert p.var_layout["z0"] == slice(18, 21)

    def test_first_move_folded_into_box(self):
        ocp = small_ocp()
        p = transcribe(ocp)
        lb, ub = p.var_bounds
        assert lb[0] == pytest.approx(0.3 - 0.5)
        assert ub[0] == pytest.approx(0.3 + 0.5)
        # later moves become range rows u_j - u_{j-1}
        assert p.lin_ineq is not None and p.lin_ineq.n_rows == 1
        np.testing.assert_allclose(p.lin_ineq.lb, [-0.5])

    def test_inconsistent_first_move_bounds(self):
        ocp = small_ocp()
        ocp.u_prev = np.array([5.0])  # u_prev + dlb exceeds the input ub
        with pytest.raises(InconsistentBounds):
            transcribe(ocp)

    def test_gradients_match_finite_differences(self):
        """Exact cost gradient and constraint Jacobian on 20 randomized
        transcribed instances."""
        for seed in range(20):
            ocp = small_ocp(slacks=(seed % 2 == 0),
                            extra_dof=(seed % 3 == 0), seed=seed)
            p = transcribe(ocp)
            rng = np.random.default_rng(100 + seed)
            v = rng.standard_normal(p.n_vars)
            v[p.var_layout.get("slacks", slice(0, 0))] = np.abs(
                v[p.var_layout.get("slacks", slice(0, 0))])
            f, g = p.cost(v)
            res, jac = p.eq_constraints(v)
            eps = 1e-6
            for j in range(p.n_vars):
                e = np.zeros(p.n_vars)
                e[j] = eps
                fp, _ = p.cost(v + e)
                fm, _ = p.cost(v - e)
                assert g[j] == pytest.approx((fp - fm) / (2 * eps), abs=2e-5)
                rp, _ = p.eq_constraints(v + e)
                rm, _ = p.eq_constraints(v - e)
                np.testing.assert_allclose(jac[:, j], (rp - rm) / (2 * eps),
                                           atol=2e-6)

    def test_solution_rolls_out_dynamics(self):
        """At a converged solution the shooting nodes reproduce an explicit
        forward rollout under the optimal moves."""
        ocp = small_ocp(hp=5, hc=2, seed=4)
        p = transcribe(ocp)
        sol = solve(p, warm_start=np.zeros(p.n_vars), tol=1e-9, max_iter=2000)
        assert sol.status == "converged"
        hp, hc, mc, n = 5, 2, 1, 3
        u = sol.v_star[p.var_layout["controls"]].reshape(hc, mc)
        x = ocp.x0.copy()
        nodes = sol.v_star[p.var_layout["states"]].reshape(hp, n)
        for k in range(hp):
            x, _, _ = ocp.dynamics.step(k, x, u[min(k, hc - 1)])
            np.testing.assert_allclose(nodes[k], x, atol=1e-6)

    def test_move_constraint_respected(self):
        ocp = small_ocp(hp=5, hc=3, seed=7)
        p = transcribe(ocp)
        sol = solve(p, warm_start=np.zeros(p.n_vars), tol=1e-8, max_iter=2000)
        assert sol.status == "converged"
        u = sol.v_star[p.var_layout["controls"]]
        moves = np.diff(np.concatenate([[0.3], u]))
        assert np.all(np.abs(moves) <= 0.5 + 1e-6)

    def test_hc_ge_hp_rejected(self):
        with pytest.raises(ValueError):
            small_ocp(hp=2, hc=2)

    def test_slack_positive_only_when_needed(self):
        """Soft band wide enough to contain the trajectory leaves every slack
        at zero; a tight band forces some slack strictly positive."""
        ocp = small_ocp(hp=4, hc=2, slacks=True, seed=2)
        ocp.slack_config = SlackConfig(indices=[0], soft_lb=[-100.0],
                                       soft_ub=[100.0], weight=10.0)
        p = transcribe(ocp)
        sol = solve(p, warm_start=np.zeros(p.n_vars), tol=1e-8, max_iter=2000)
        assert sol.status == "converged"
        assert np.max(sol.v_star[p.var_layout["slacks"]]) <= 1e-6

        x0_mag = float(np.max(np.abs(ocp.x0)))
        ocp.slack_config = SlackConfig(indices=[0],
                                       soft_lb=[-0.01 * x0_mag],
                                       soft_ub=[0.01 * x0_mag], weight=10.0)
        ocp.input_bounds = (np.array([0.0]), np.array([0.0]))
        ocp.u_prev = None
        ocp.delta_input_bounds = None
        p2 = transcribe(ocp)
        sol2 = solve(p2, warm_start=np.zeros(p2.n_vars), tol=1e-8,
                     max_iter=4000)
        assert np.max(sol2.v_star[p2.var_layout["slacks"]]) > 1e-4
