import numpy as np
import pytest

from tube_nmpc.controllers import (AncillaryCostModel, ConstraintSets,
                                   ControllerState, CostWeights,
                                   IntervalDynamics, PiGains, TrackingCostModel,
                                   TubeSolution, _clip_move, classical_step,
                                   override_pi_step, smooth_norm,
                                   smooth_norm_curv, tracking_cost, tube_slice)
from tube_nmpc.integrator import constant_schedule, simulate_interval

TC = 0.25
HP, HC = 6, 2


@pytest.fixture
def dyn(cfg, params, phase1_flows):
    d_known = np.tile(phase1_flows, (HP, 1))
    return IntervalDynamics(cfg, params, d_known, TC)


@pytest.fixture
def sets(cfg):
    n = cfg.n
    return ConstraintSets(
        x_lb=np.zeros(n), x_ub=np.full(n, 500.0),
        u_lb=np.array([0.0]), u_ub=np.array([1.0]),
        du_lb=np.array([-0.2]), du_ub=np.array([0.2]))


class TestSmoothNorm:
    def test_matches_weighted_norm_away_from_zero(self):
        e = np.array([3.0, -4.0])
        w = np.array([1.0, 1.0])
        phi, _ = smooth_norm(e, w)
        assert phi == pytest.approx(5.0, abs=2e-3)

    def test_zero_at_origin_with_zero_gradient_limit(self):
        phi, g = smooth_norm(np.zeros(3), np.ones(3))
        assert phi == 0.0
        np.testing.assert_allclose(g, 0.0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        e = rng.standard_normal(4)
        w = np.abs(rng.standard_normal(4)) + 0.1
        _, g = smooth_norm(e, w)
        eps = 1e-7
        for j in range(4):
            d = np.zeros(4)
            d[j] = eps
            fp, _ = smooth_norm(e + d, w)
            fm, _ = smooth_norm(e - d, w)
            assert g[j] == pytest.approx((fp - fm) / (2 * eps), abs=1e-6)

    def test_curvature_matches_finite_differences_and_is_psd(self):
        rng = np.random.default_rng(1)
        e = rng.standard_normal(4)
        w = np.abs(rng.standard_normal(4)) + 0.1
        phi, g, h = smooth_norm_curv(e, w)
        phi2, g2 = smooth_norm(e, w)
        assert phi == phi2
        np.testing.assert_allclose(g, g2)
        eps = 1e-6
        for j in range(4):
            d = np.zeros(4)
            d[j] = eps
            _, gp = smooth_norm(e + d, w)
            _, gm = smooth_norm(e - d, w)
            np.testing.assert_allclose(h[:, j], (gp - gm) / (2 * eps),
                                       atol=1e-5)
        assert np.min(np.linalg.eigvalsh(h)) >= -1e-12


class TestWeightsAndSets:
    def test_cost_weights_validation(self):
        with pytest.raises(ValueError):
            CostWeights(wy=[-1.0, 1.0], ybar=[1.0, 1.0])
        with pytest.raises(ValueError):
            CostWeights(wy=[1.0, 1.0], ybar=[0.0, 1.0])
        with pytest.raises(ValueError):
            CostWeights(wy=[1.0, 1.0], ybar=[1.0, 1.0], wx=-0.1)

    def test_constraint_sets_validation(self):
        with pytest.raises(ValueError):
            ConstraintSets(x_lb=[1.0], x_ub=[0.0], u_lb=[0.0], u_ub=[1.0],
                           du_lb=[-1.0], du_ub=[1.0])

    def test_nesting_check(self, sets, cfg):
        inner = ConstraintSets(
            x_lb=sets.x_lb + 1.0, x_ub=sets.x_ub - 1.0,
            u_lb=sets.u_lb + 0.05, u_ub=sets.u_ub - 0.05,
            du_lb=sets.du_lb, du_ub=sets.du_ub)
        inner.assert_nested_in(sets)
        with pytest.raises(ValueError):
            sets.assert_nested_in(inner)

    def test_clip_move_order(self, sets):
        # demand far above the box: clipped to u_ub, then the move limit
        u = _clip_move(np.array([5.0]), np.array([0.1]), sets)
        assert u[0] == pytest.approx(0.3)
        # within both limits: untouched
        u = _clip_move(np.array([0.15]), np.array([0.1]), sets)
        assert u[0] == pytest.approx(0.15)
        # move limit must never push outside the hard box
        u = _clip_move(np.array([-2.0]), np.array([0.05]), sets)
        assert u[0] == pytest.approx(0.0)


class TestTrackingCostFunction:
    def test_hand_computed_value(self):
        w = CostWeights(wy=[1.0, 4.0], ybar=[2.0, 1.0])
        y = np.array([[3.0, 1.0], [2.0, 0.5]])
        y_ref = np.array([[1.0, 1.0], [2.0, 0.0]])
        # stage 1: e = [1, 0], cost 1; stage 2: e = [0, 0.5], cost 1
        assert tracking_cost(y, y_ref, w) == pytest.approx(2.0)

    def test_shape_mismatch(self):
        w = CostWeights(wy=[1.0, 1.0], ybar=[1.0, 1.0])
        with pytest.raises(ValueError):
            tracking_cost(np.zeros((3, 2)), np.zeros((2, 2)), w)


class TestIntervalDynamics:
    def test_step_matches_integrator(self, dyn, cfg, params, steady_state,
                                     phase1_flows):
        u = np.array([0.2])
        x_next, _, _ = dyn.step(0, steady_state, u)
        flows = phase1_flows.copy()
        flows[cfg.controllable_index] = u[0]
        sch = constant_schedule(flows, 0.0, TC)
        traj = simulate_interval(steady_state, sch, 0.0, TC, cfg, params,
                                 clamp=False)
        np.testing.assert_allclose(x_next, traj.states[-1], rtol=1e-12)

    def test_horizon_step_matches_single_steps(self, dyn, steady_state):
        rng = np.random.default_rng(2)
        x_starts = steady_state * (1 + 0.02 * rng.standard_normal((HP, dyn.n)))
        us = 0.3 * rng.random((HP, 1))
        x_ends, sx_all, su_all = dyn.horizon_step(x_starts, us)
        for k in range(HP):
            xe, sx, su = dyn.step(k, x_starts[k], us[k])
            np.testing.assert_allclose(x_ends[k], xe, rtol=1e-13)
            np.testing.assert_allclose(sx_all[k], sx, rtol=1e-13)
            np.testing.assert_allclose(su_all[k], su, rtol=1e-13)

    def test_chain_matches_rollout(self, dyn, steady_state):
        us = np.full((HP, 1), 0.15)
        zs, gs = dyn.chain_sens(steady_state, us)
        xs = dyn.rollout(steady_state, us)
        np.testing.assert_allclose(zs, xs, rtol=1e-12)
        assert gs.shape == (HP + 1, dyn.n, dyn.n)
        np.testing.assert_allclose(gs[0], np.eye(dyn.n))

    def test_bad_substep_rejected(self, cfg, params, phase1_flows):
        with pytest.raises(ValueError):
            IntervalDynamics(cfg, params, np.tile(phase1_flows, (HP, 1)),
                             tc=0.25, substep=0.06)


def fd_grad_check(cost, xs, us, z0, atol=1e-5):
    j, gx, gu, gz0 = cost.evaluate(xs, us, z0)
    eps = 1e-6
    for t in range(xs.shape[0]):
        for i in range(xs.shape[1]):
            d = np.zeros_like(xs)
            d[t, i] = eps
            jp = cost.evaluate(xs + d, us, z0)[0]
            jm = cost.evaluate(xs - d, us, z0)[0]
            assert gx[t, i] == pytest.approx((jp - jm) / (2 * eps), abs=atol)
    for t in range(us.shape[0]):
        d = np.zeros_like(us)
        d[t, 0] = eps
        jp = cost.evaluate(xs, us + d, z0)[0]
        jm = cost.evaluate(xs, us - d, z0)[0]
        assert gu[t, 0] == pytest.approx((jp - jm) / (2 * eps), abs=atol)
    if z0 is not None and gz0 is not None:
        for i in range(len(z0)):
            d = np.zeros_like(z0)
            d[i] = eps
            jp = cost.evaluate(xs, us, z0 + d)[0]
            jm = cost.evaluate(xs, us, z0 - d)[0]
            assert gz0[i] == pytest.approx((jp - jm) / (2 * eps), abs=atol)


class TestCostModels:
    def test_tracking_cost_model_gradients(self, dyn, steady_state):
        rng = np.random.default_rng(3)
        xs = steady_state * (1 + 0.05 * rng.standard_normal((HP + 1, dyn.n)))
        us = 0.3 * rng.random((HP, 1))
        y_ss = dyn.output(steady_state)
        w = CostWeights(wy=[1.0, 1.0], ybar=np.maximum(y_ss, 0.1))
        y_ref = np.tile(y_ss * 1.05, (HP, 1))
        cost = TrackingCostModel(dyn, y_ref, w)
        fd_grad_check(cost, xs, us, None)

    def test_ancillary_cost_gradients_offline_and_online(self, dyn, cfg,
                                                         steady_state):
        rng = np.random.default_rng(4)
        nu = 0.1 + 0.1 * rng.random((HP, 1))
        zs = dyn.rollout(steady_state, nu)
        tube = TubeSolution(z_star=zs, nu_star=nu)
        y_ss = dyn.output(steady_state)
        w = CostWeights(wy=[1.0, 1.0], ybar=np.maximum(y_ss, 0.1),
                        wy_hp=1.0, wx=0.5, wu=0.2)
        x_scale = np.maximum(steady_state, 1.0)
        xs = zs * (1 + 0.03 * rng.standard_normal(zs.shape))
        us = nu + 0.05 * rng.standard_normal(nu.shape)

        offline = AncillaryCostModel(dyn, tube, y_ss, w, x_scale,
                                     np.array([0.5]))
        fd_grad_check(offline, xs, us, None)

        z_bounds = (np.zeros(cfg.n), np.full(cfg.n, 400.0))
        online = AncillaryCostModel(dyn, tube, y_ss, w, x_scale,
                                    np.array([0.5]), nominal_dyn=dyn,
                                    chain_bounds=z_bounds)
        z0 = steady_state * (1 + 0.01 * rng.standard_normal(cfg.n))
        fd_grad_check(online, xs, us, z0, atol=5e-4)

    def test_ancillary_hess_blocks_shapes(self, dyn, cfg, steady_state):
        nu = np.full((HP, 1), 0.15)
        zs = dyn.rollout(steady_state, nu)
        tube = TubeSolution(z_star=zs, nu_star=nu)
        y_ss = dyn.output(steady_state)
        w = CostWeights(wy=[1.0, 1.0], ybar=np.maximum(y_ss, 0.1),
                        wx=0.5, wu=0.2)
        x_scale = np.maximum(steady_state, 1.0)
        online = AncillaryCostModel(dyn, tube, y_ss, w, x_scale,
                                    np.array([0.5]), nominal_dyn=dyn,
                                    chain_bounds=(np.zeros(cfg.n),
                                                  np.full(cfg.n, 400.0)))
        xs = zs.copy()
        hx, hu, hz0, hxz0 = online.hess(xs, nu, steady_state)
        assert hx.shape == (HP + 1, cfg.n, cfg.n)
        assert hu.shape == (HP, 1, 1)
        assert hz0.shape == (cfg.n, cfg.n)
        assert hxz0.shape == (HP + 1, cfg.n, cfg.n)
        # the initial-state curvature is PSD by construction
        assert np.min(np.linalg.eigvalsh(0.5 * (hz0 + hz0.T))) >= -1e-10


class TestTubeSlice:
    def test_interior_window(self):
        store = TubeSolution(z_star=np.arange(11)[:, None].astype(float),
                             nu_star=np.arange(10)[:, None].astype(float))
        sl = tube_slice(store, 3, 4)
        np.testing.assert_allclose(sl.z_star[:, 0], [3, 4, 5, 6, 7])
        np.testing.assert_allclose(sl.nu_star[:, 0], [3, 4, 5, 6])

    def test_edge_repeats_last_values(self):
        store = TubeSolution(z_star=np.arange(11)[:, None].astype(float),
                             nu_star=np.arange(10)[:, None].astype(float))
        sl = tube_slice(store, 8, 4)
        np.testing.assert_allclose(sl.z_star[:, 0], [8, 9, 10, 10, 10])
        np.testing.assert_allclose(sl.nu_star[:, 0], [8, 9, 9, 9])


class TestOverridePi:
    def make(self, ratio_setpoint=0.6):
        gains = PiGains(kp1=0.02, ki1=0.01, kp2=2.0, ki2=2.0, u_ss=0.2,
                        ratio_setpoint=ratio_setpoint)
        st = ControllerState(mode="override-pi",
                             previous_input=np.array([0.2]))
        return gains, st

    def test_tracks_methane_reference(self, sets):
        gains, st = self.make()
        # methane below reference and ratio healthy: feed increases
        u, diag = override_pi_step(np.array([1.0, 0.3]), 2.0, gains, sets, st,
                                   TC)
        assert u[0] > gains.u_ss
        assert not diag.saturated

    def test_ratio_override_wins_low_select(self, sets):
        gains, st = self.make()
        # ratio far above its setpoint: the safety loop demands a cut
        u, _ = override_pi_step(np.array([1.0, 2.0]), 2.0, gains, sets, st, TC)
        u1 = gains.u_ss + gains.kp1 * (2.0 - 1.0) + gains.ki1 * (2.0 - 1.0) * TC
        assert u[0] < u1

    def test_saturation_means_demand_outside_set(self, sets):
        gains, st = self.make()
        u, diag = override_pi_step(np.array([1.0, 5.0]), 2.0, gains, sets, st,
                                   TC)
        assert u[0] == sets.u_lb[0]
        assert diag.saturated

    def test_anti_windup_freezes_saturated_loop(self, sets):
        gains, st = self.make()
        for _ in range(5):
            override_pi_step(np.array([1.0, 5.0]), 2.0, gains, sets, st, TC)
        # ratio loop is pinned at the lower bound: its integral must not run
        # away, and the methane loop was never selected
        assert abs(st.pi_integrals[1]) < 10.0
        assert st.pi_integrals[0] == 0.0

    def test_deterministic(self, sets):
        g1, s1 = self.make()
        g2, s2 = self.make()
        for _ in range(3):
            ua, _ = override_pi_step(np.array([1.2, 0.4]), 2.0, g1, sets, s1,
                                     TC)
            ub, _ = override_pi_step(np.array([1.2, 0.4]), 2.0, g2, sets, s2,
                                     TC)
            assert ua[0] == ub[0]


class TestClassicalStep:
    def test_returns_feasible_move(self, dyn, cfg, sets, steady_state,
                                   phase1_flows):
        y_ss = dyn.output(steady_state)
        w = CostWeights(wy=[1.0, 1.0], ybar=np.maximum(y_ss, 0.1))
        refs = np.tile(y_ss, (HP, 1))
        st = ControllerState(
            mode="classical",
            previous_input=phase1_flows[cfg.controllable_index:
                                        cfg.controllable_index + 1].copy())
        d_known = np.tile(phase1_flows, (HP, 1))
        u_prev = st.previous_input.copy()
        u, diag = classical_step(steady_state, refs, d_known, sets, w, st,
                                 dyn, HP, HC)
        assert sets.u_lb[0] - 1e-9 <= u[0] <= sets.u_ub[0] + 1e-9
        assert u_prev[0] + sets.du_lb[0] - 1e-9 <= u[0] <= \
            u_prev[0] + sets.du_ub[0] + 1e-9
        assert not diag.fallback
        assert diag.status in ("converged", "max_iter")
        # at the reference steady state the optimal move barely deviates
        assert abs(u[0] - u_prev[0]) < 0.05
