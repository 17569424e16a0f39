"""Receding-horizon controllers: classical NMPC, offline-tube, online-tube
and the override-PI baseline.

All NMPC variants share one interface: a step function takes the current
plant state, reference slices over the prediction horizon and the known feed
plan, solves a multiple-shooting NLP and returns the single control move to
apply over the next interval. The tube variants split the work into a nominal
problem (undisturbed model, tightened sets, output-tracking cost) and an
ancillary problem that tracks the nominal trajectory (z*, nu*) with weighted
state/input penalties; online mode re-optimizes the nominal initial state
z0* as an extra decision variable of the ancillary problem and feeds it back.

Tracking penalties are weighted 2-norms (not squares), smoothed as
sqrt(e'We + delta^2) - delta so the NLP stays twice differentiable.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .errors import SolverFailure
from .model import KineticParams, ReactorConfig
from .nlp import OcpSpec, SlackConfig, transcribe, solve

NORM_SMOOTHING = 1e-3
SLACK_WEIGHT = 1e4
# soft penalty keeping the regenerated nominal chain inside its tightened set
# when z0* is a decision variable (the chain nodes are not NLP variables)
CHAIN_PENALTY = 1e4

SOLVE_TOL = 1e-5
SOLVE_MAX_ITER = 2000
# accept a max_iter exit when the point is still decent; the applied move is
# clipped to the hard input sets regardless
ACCEPT_KKT = 1e-2


def smooth_norm(e, w):
    """sqrt(e'We + d^2) - d and its gradient w.r.t. e."""
    q = float(e @ (w * e)) + NORM_SMOOTHING ** 2
    s = np.sqrt(q)
    g = (w * e) / s
    return s - NORM_SMOOTHING, g


def smooth_norm_curv(e, w):
    """smooth_norm value/gradient plus the Gauss-Newton Hessian w.r.t. e."""
    q = float(e @ (w * e)) + NORM_SMOOTHING ** 2
    s = np.sqrt(q)
    we = w * e
    g = we / s
    # GN Hessian of the norm: W/s - (We)(We)'/s^3, PSD by Cauchy-Schwarz
    h = np.diag(w) / s - np.outer(we, we) / (s * q)
    return s - NORM_SMOOTHING, g, h


@dataclass
class CostWeights:
    wy: np.ndarray          # diagonal output weights, length p
    ybar: np.ndarray        # output normalization, > 0
    wy_hp: float = 1.0      # terminal output-tracking weight (ancillary)
    wx: float = 0.0         # state-tracking weight (ancillary)
    wu: float = 0.0         # input-tracking weight (ancillary)

    def __post_init__(self):
        self.wy = np.asarray(self.wy, dtype=float)
        self.ybar = np.asarray(self.ybar, dtype=float)
        if np.any(self.wy < 0) or min(self.wy_hp, self.wx, self.wu) < 0:
            raise ValueError("weights must be nonnegative")
        if np.any(self.ybar <= 0):
            raise ValueError("ybar must be positive elementwise")


@dataclass
class ConstraintSets:
    """Box sets for one problem: states (n), controllable inputs (mc), moves."""
    x_lb: np.ndarray
    x_ub: np.ndarray
    u_lb: np.ndarray
    u_ub: np.ndarray
    du_lb: np.ndarray
    du_ub: np.ndarray

    def __post_init__(self):
        for name in ("x_lb", "x_ub", "u_lb", "u_ub", "du_lb", "du_ub"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if (np.any(self.x_lb > self.x_ub) or np.any(self.u_lb > self.u_ub)
                or np.any(self.du_lb > self.du_ub)):
            raise ValueError("constraint set has lb > ub")

    def assert_nested_in(self, outer: "ConstraintSets"):
        """Nominal sets must sit inside the ancillary ones."""
        if (np.any(self.x_lb < outer.x_lb) or np.any(self.x_ub > outer.x_ub)
                or np.any(self.u_lb < outer.u_lb)
                or np.any(self.u_ub > outer.u_ub)):
            raise ValueError("nominal sets are not nested in the ancillary sets")


@dataclass
class TubeSolution:
    z_star: np.ndarray   # (Hp+1, n) nominal states, z_star[0] = z0
    nu_star: np.ndarray  # (Hp, mc) nominal inputs
    z0_star: Optional[np.ndarray] = None  # re-optimized initial state (online)


@dataclass
class StepDiagnostics:
    status: str
    kkt: float
    iterations: int
    cost: float
    fallback: bool = False
    slack_max: float = 0.0
    saturated: bool = False


@dataclass
class ControllerState:
    mode: str
    previous_input: np.ndarray  # (mc,) last applied controllable flow
    warm: dict = field(default_factory=dict)  # problem tag -> (v, lam)
    z0_star: Optional[np.ndarray] = None      # online-tube chain state
    offline_store: Optional[TubeSolution] = None  # full-scenario (z*, nu*)
    step_index: int = 0
    pi_integrals: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.previous_input = np.asarray(self.previous_input, dtype=float)


class IntervalDynamics:
    """Shooting map over one control interval: nominal model, fixed flows for
    the uncontrollable feedstocks, the controllable one set per move."""

    def __init__(self, cfg: ReactorConfig, p: KineticParams, d_known,
                 tc: float, substep: float = 0.025):
        self.cfg = cfg
        self.p = p
        self.tc = tc
        self.n_sub = int(round(tc / substep))
        if abs(self.n_sub * substep - tc) > 1e-9:
            raise ValueError("substep must divide the control interval")
        self.dt = substep
        self.ci = cfg.controllable_index
        self.n = cfg.n
        self.mc = 1
        self.kin = p.pack()
        self.theta = cfg.theta_u_matrix
        # d_known: (Hp, m) per-interval flows of every feedstock; the
        # controllable column is overwritten by the decision variable
        self.d_known = np.asarray(d_known, dtype=float)

    @property
    def d_known(self):
        return self._d_known

    @d_known.setter
    def d_known(self, value):
        self._d_known = np.asarray(value, dtype=float)
        # substep-resolved flow grid, rebuilt once per assignment instead of
        # tiled on every shooting evaluation
        self._flow_grid = np.repeat(
            self._d_known[:, None, :], self.n_sub, axis=1)
        self._mu2f = getattr(self, "_mu2f", 1.0)
        self._mu2f_grid = np.full((self._d_known.shape[0], self.n_sub),
                                  self._mu2f)

    def set_mu2_factor(self, f: float):
        """Scale the acetoclastic growth rate in every prediction and output
        map; the model-correction lane of the offset-free scheme."""
        self._mu2f = float(f)
        self._mu2f_grid.fill(self._mu2f)

    def _flows(self, k, u):
        flows = self._flow_grid[k].copy()
        flows[:, self.ci] = u[0]
        return flows

    def step(self, k, x, u):
        x_next, sx, su = kernels.rk4_interval_sens(
            np.asarray(x, dtype=float), self._flows(k, u),
            self._mu2f_grid[k], self.dt, self.theta, self.p.k_hyd, self.kin,
            self.cfg.volume)
        return x_next, sx, su[:, self.ci:self.ci + 1]

    def horizon_step(self, x_starts, us):
        """Batched step over independent shooting intervals 0..Hp-1.

        x_starts: (Hp, n) node states, us: (Hp, mc). Returns
        (x_ends (Hp, n), Sx (Hp, n, n), Su (Hp, n, mc))."""
        hp = x_starts.shape[0]
        flows = self._flow_grid[:hp].copy()
        flows[:, :, self.ci] = us[:, 0:1]
        x_ends, sx_all, su_all = kernels.rk4_horizon_sens(
            np.asarray(x_starts, dtype=float), flows, self._mu2f_grid[:hp],
            self.dt, self.theta, self.p.k_hyd, self.kin, self.cfg.volume)
        return x_ends, sx_all, su_all[:, :, self.ci:self.ci + 1]

    def chain_sens(self, z0, us):
        """Sequential rollout z_{t+1} = Phi(z_t, u_t) from z0 with the chained
        sensitivities d z_t / d z0; one kernel call for the whole horizon."""
        hp = us.shape[0]
        flows = self._flow_grid[:hp].copy()
        flows[:, :, self.ci] = us[:, 0:1]
        return kernels.rk4_chain_sens(
            np.asarray(z0, dtype=float), flows, self._mu2f_grid[:hp],
            self.dt, self.theta, self.p.k_hyd, self.kin, self.cfg.volume)

    def horizon_step_nosens(self, x_starts, us):
        """Batched interval rollout over independent shooting nodes, value
        only; the cheap lane for line-search trial points."""
        hp = x_starts.shape[0]
        flows = self._flow_grid[:hp].copy()
        flows[:, :, self.ci] = us[:, 0:1]
        return kernels.rk4_horizon(
            np.asarray(x_starts, dtype=float), flows, self._mu2f_grid[:hp],
            self.dt, self.theta, self.p.k_hyd, self.kin, self.cfg.volume)

    def chain_nosens(self, z0, us):
        """Sequential rollout from z0 without sensitivities."""
        hp = us.shape[0]
        flows = self._flow_grid[:hp].copy()
        flows[:, :, self.ci] = us[:, 0:1]
        return kernels.rk4_chain(
            np.asarray(z0, dtype=float), flows, self._mu2f_grid[:hp],
            self.dt, self.theta, self.p.k_hyd, self.kin, self.cfg.volume)

    def step_nosens(self, k, x, u):
        traj, _ = kernels.rk4_interval(
            np.asarray(x, dtype=float), self._flows(k, u),
            self._mu2f_grid[k], self.dt, self.theta, self.p.k_hyd, self.kin,
            self.cfg.volume, False)
        return traj[-1]

    def rollout(self, x0, us):
        """Node states from stitching step() over the horizon (no clamping)."""
        xs = np.empty((len(us) + 1, self.n))
        xs[0] = x0
        for k in range(len(us)):
            xs[k + 1] = self.step_nosens(k, xs[k], us[k])
        return xs

    def output(self, x, mu2_factor=None):
        f = self._mu2f if mu2_factor is None else float(mu2_factor)
        return kernels.output_vec(np.asarray(x, float), self.kin, self.cfg.m, f)

    def output_jac(self, x):
        return kernels.output_jac(np.asarray(x, float), self.kin, self.cfg.m,
                                  self._mu2f)

    def output_traj_jac(self, xs):
        xs = np.asarray(xs, dtype=float)
        return kernels.output_traj_jac(
            xs, self.kin, self.cfg.m, np.full(xs.shape[0], self._mu2f))


class TrackingCostModel:
    """Output-tracking stage cost: sum over stages 1..Hp of the smoothed
    weighted norm of (y_t - y_ref,t)/ybar."""

    def __init__(self, dyn: IntervalDynamics, y_ref, w: CostWeights):
        self.dyn = dyn
        self.y_ref = np.asarray(y_ref, dtype=float)  # (Hp, p), stages 1..Hp
        self.w = w

    def evaluate(self, xs, us, z0):
        gx = np.zeros_like(xs)
        gu = np.zeros_like(us)
        ys, jys = self.dyn.output_traj_jac(xs[1:])
        e = (ys - self.y_ref) / self.w.ybar
        s = np.sqrt(np.sum(e * self.w.wy * e, axis=1) + NORM_SMOOTHING ** 2)
        j = float(np.sum(s - NORM_SMOOTHING))
        ge = (self.w.wy * e) / s[:, None]
        gx[1:] = np.einsum("tp,tpn->tn", ge / self.w.ybar, jys)
        return j, gx, gu, None

    def value(self, xs, us, z0):
        ys = np.array([self.dyn.output(x) for x in xs[1:]])
        e = (ys - self.y_ref) / self.w.ybar
        s = np.sqrt(np.sum(e * self.w.wy * e, axis=1) + NORM_SMOOTHING ** 2)
        return float(np.sum(s - NORM_SMOOTHING))

    def hess(self, xs, us, z0):
        hp1, n = xs.shape
        hx = np.zeros((hp1, n, n))
        hu = np.zeros((us.shape[0], us.shape[1], us.shape[1]))
        ys, jys = self.dyn.output_traj_jac(xs[1:])
        for t in range(1, hp1):
            e = (ys[t - 1] - self.y_ref[t - 1]) / self.w.ybar
            _, _, he = smooth_norm_curv(e, self.w.wy)
            jn = jys[t - 1] / self.w.ybar[:, None]
            hx[t] = jn.T @ he @ jn
        return hx, hu, None


class AncillaryCostModel:
    """Tube-tracking cost: terminal output term plus stage penalties on the
    distance to the nominal trajectory,

        wy_hp * phi(y_Hp - y_ref_Hp) + sum_t (wx ||x_t - z*_t||_s
                                              + wu ||u_t - nu*_t||_s)

    with state/input errors normalized by the scenario scales. In online mode
    z* is regenerated inside the cost from the decision variable z0 by rolling
    the nominal model forward under nu*; chain nodes leaving the tightened set
    are penalized quadratically (they are not NLP variables, so the bound
    cannot be imposed directly)."""

    def __init__(self, dyn: IntervalDynamics, tube: TubeSolution,
                 y_ref_hp, w: CostWeights, x_scale, u_scale,
                 nominal_dyn: Optional[IntervalDynamics] = None,
                 chain_bounds=None):
        self.dyn = dyn
        self.tube = tube
        self.y_ref_hp = np.asarray(y_ref_hp, dtype=float)
        self.w = w
        self.x_scale = np.asarray(x_scale, dtype=float)
        self.u_scale = np.asarray(u_scale, dtype=float)
        self.online = nominal_dyn is not None
        self.nominal_dyn = nominal_dyn
        self.chain_bounds = chain_bounds  # (z_lb, z_ub) for the soft penalty
        self.wx_vec = np.ones(len(self.x_scale))
        self.wu_vec = np.ones(len(self.u_scale))
        self._chain_cache = {"key": None, "val": None}

    def _chain(self, z0):
        """Nominal nodes z_t(z0) under nu*, with sensitivities dz_t/dz0."""
        key = z0.tobytes()
        if key == self._chain_cache["key"]:
            return self._chain_cache["val"]
        zs, gs = self.nominal_dyn.chain_sens(z0, self.tube.nu_star)
        self._chain_cache["key"] = key
        self._chain_cache["val"] = (zs, gs)
        return zs, gs

    def _z_nodes(self, z0):
        if self.online:
            return self._chain(z0)
        return self.tube.z_star, None

    def evaluate(self, xs, us, z0):
        hp = us.shape[0]
        zs, gs = self._z_nodes(z0)
        j = 0.0
        gx = np.zeros_like(xs)
        gu = np.zeros_like(us)
        gz0 = np.zeros(xs.shape[1]) if self.online else None

        y, jy = self.dyn.output_jac(xs[hp])
        e = (y - self.y_ref_hp) / self.w.ybar
        phi, ge = smooth_norm(e, self.w.wy)
        j += self.w.wy_hp * phi
        gx[hp] += self.w.wy_hp * (ge / self.w.ybar) @ jy

        if self.w.wx > 0.0 and hp > 1:
            ex = (xs[1:hp] - zs[1:hp]) / self.x_scale
            s = np.sqrt(np.sum(ex * self.wx_vec * ex, axis=1)
                        + NORM_SMOOTHING ** 2)
            j += self.w.wx * float(np.sum(s - NORM_SMOOTHING))
            gex = (self.wx_vec * ex) / s[:, None] / self.x_scale
            gx[1:hp] += self.w.wx * gex
            if self.online:
                gz0 -= self.w.wx * np.einsum("tn,tnm->m", gex, gs[1:hp])
        if self.w.wu > 0.0:
            eu = (us - self.tube.nu_star[:hp]) / self.u_scale
            s = np.sqrt(np.sum(eu * self.wu_vec * eu, axis=1)
                        + NORM_SMOOTHING ** 2)
            j += self.w.wu * float(np.sum(s - NORM_SMOOTHING))
            gu += self.w.wu * (self.wu_vec * eu) / s[:, None] / self.u_scale

        if self.online and self.chain_bounds is not None:
            z_lb, z_ub = self.chain_bounds
            over = np.maximum(zs[1:] - z_ub, 0.0) / self.x_scale
            under = np.maximum(z_lb - zs[1:], 0.0) / self.x_scale
            j += CHAIN_PENALTY * float(np.sum(over * over + under * under))
            gz = 2.0 * CHAIN_PENALTY * (over - under) / self.x_scale
            gz0 += np.einsum("tn,tnm->m", gz, gs[1:])
        return j, gx, gu, gz0

    def value(self, xs, us, z0):
        hp = us.shape[0]
        if self.online:
            key = z0.tobytes()
            if key == self._chain_cache["key"]:
                zs = self._chain_cache["val"][0]
            else:
                zs = self.nominal_dyn.chain_nosens(z0, self.tube.nu_star)
        else:
            zs = self.tube.z_star
        e = (self.dyn.output(xs[hp]) - self.y_ref_hp) / self.w.ybar
        j = self.w.wy_hp * (float(np.sqrt(e @ (self.w.wy * e)
                                          + NORM_SMOOTHING ** 2))
                            - NORM_SMOOTHING)
        if self.w.wx > 0.0 and hp > 1:
            ex = (xs[1:hp] - zs[1:hp]) / self.x_scale
            s = np.sqrt(np.sum(ex * self.wx_vec * ex, axis=1)
                        + NORM_SMOOTHING ** 2)
            j += self.w.wx * float(np.sum(s - NORM_SMOOTHING))
        if self.w.wu > 0.0:
            eu = (us - self.tube.nu_star[:hp]) / self.u_scale
            s = np.sqrt(np.sum(eu * self.wu_vec * eu, axis=1)
                        + NORM_SMOOTHING ** 2)
            j += self.w.wu * float(np.sum(s - NORM_SMOOTHING))
        if self.online and self.chain_bounds is not None:
            z_lb, z_ub = self.chain_bounds
            over = np.maximum(zs[1:] - z_ub, 0.0) / self.x_scale
            under = np.maximum(z_lb - zs[1:], 0.0) / self.x_scale
            j += CHAIN_PENALTY * float(np.sum(over * over + under * under))
        return float(j)

    def hess(self, xs, us, z0):
        hp = us.shape[0]
        n = xs.shape[1]
        mc = us.shape[1]
        hx = np.zeros((hp + 1, n, n))
        hu = np.zeros((hp, mc, mc))

        y, jy = self.dyn.output_jac(xs[hp])
        e = (y - self.y_ref_hp) / self.w.ybar
        _, _, he = smooth_norm_curv(e, self.w.wy)
        jn = jy / self.w.ybar[:, None]
        hx[hp] += self.w.wy_hp * jn.T @ he @ jn

        if self.w.wx > 0.0:
            zs, gs = self._z_nodes(z0)
            for t in range(1, hp):
                ex = (xs[t] - zs[t]) / self.x_scale
                _, _, hex_ = smooth_norm_curv(ex, self.wx_vec)
                hx[t] += self.w.wx * hex_ / np.outer(self.x_scale, self.x_scale)
        if self.w.wu > 0.0:
            for t in range(hp):
                eu = (us[t] - self.tube.nu_star[t]) / self.u_scale
                _, _, heu = smooth_norm_curv(eu, self.wu_vec)
                hu[t] += self.w.wu * heu / np.outer(self.u_scale, self.u_scale)

        hz0 = None
        hxz0 = None
        if self.online:
            zs, gs = self._z_nodes(z0)
            hz0 = np.zeros((n, n))
            hxz0 = np.zeros((hp + 1, n, n))
            if self.w.wx > 0.0:
                for t in range(1, hp):
                    ex = (xs[t] - zs[t]) / self.x_scale
                    _, _, hex_ = smooth_norm_curv(ex, self.wx_vec)
                    m = hex_ / np.outer(self.x_scale, self.x_scale)
                    mg = m @ gs[t]
                    hz0 += self.w.wx * gs[t].T @ mg
                    # stage error depends on x_t and (through the chain) on
                    # z0; without this cross block the Newton model decouples
                    # the two and convergence degrades badly
                    hxz0[t] = -self.w.wx * mg
            if self.chain_bounds is not None:
                z_lb, z_ub = self.chain_bounds
                for t in range(1, hp + 1):
                    active = ((zs[t] > z_ub) | (zs[t] < z_lb)).astype(float)
                    d = 2.0 * CHAIN_PENALTY * active / self.x_scale ** 2
                    hz0 += gs[t].T @ (d[:, None] * gs[t])
        return hx, hu, hz0, hxz0


def tracking_cost(y_traj, y_ref_traj, w: CostWeights) -> float:
    """Normalized weighted-norm tracking cost of an output trajectory."""
    y_traj = np.asarray(y_traj, dtype=float)
    y_ref_traj = np.asarray(y_ref_traj, dtype=float)
    if y_traj.shape != y_ref_traj.shape:
        raise ValueError("trajectory and reference lengths differ")
    e = (y_traj - y_ref_traj) / w.ybar
    return float(np.sum(np.sqrt(np.sum((e * e) * w.wy, axis=-1))))


# ---------------------------------------------------------------------------
# shared NMPC plumbing


def _default_x_scale(cfg: ReactorConfig):
    """Magnitude guesses per state for scaling; refined by the scenario."""
    return np.concatenate([np.ones(cfg.m), [2.0, 2.0, 2.0, 20.0, 80.0, 110.0]])


def _solve_ocp(ocp: OcpSpec, st: ControllerState, tag: str, dyn,
               tol=SOLVE_TOL, max_iter=SOLVE_MAX_ITER):
    """Transcribe and solve with shift-style warm starting keyed by tag."""
    prob = transcribe(ocp)
    hp, mc = ocp.horizon, dyn.mc
    warm = st.warm.get(tag)
    lam = None
    if warm is not None and len(warm[0]) == prob.n_vars:
        v_prev, lam = warm
        # shift controls one interval, keep the tail move
        u_prev_moves = v_prev[prob.var_layout["controls"]].reshape(-1, mc)
        u_shift = np.vstack([u_prev_moves[1:], u_prev_moves[-1:]])
    else:
        u_shift = np.tile(ocp.u_prev if ocp.u_prev is not None
                          else 0.5 * (ocp.input_bounds[0] + ocp.input_bounds[1]),
                          (ocp.control_horizon, 1))
    us_full = [u_shift[min(k, ocp.control_horizon - 1)] for k in range(hp)]
    xs = dyn.rollout(ocp.x0, us_full)
    parts = [u_shift.ravel(), xs[1:].ravel()]
    if ocp.slack_config is not None:
        parts.append(np.zeros(hp * len(ocp.slack_config.indices)))
    if ocp.extra_initial_state_dof:
        z0_init = (st.z0_star if st.z0_star is not None else ocp.x0)
        parts.append(np.asarray(z0_init, dtype=float))
    w0 = np.concatenate(parts)
    sol = solve(prob, warm_start=w0, warm_multipliers=lam, tol=tol,
                max_iter=max_iter)
    ok = sol.status == "converged" or (
        sol.status == "max_iter" and sol.kkt_residual <= ACCEPT_KKT)
    if ok:
        st.warm[tag] = (sol.v_star.copy(),
                        np.concatenate([sol.lam_eq, sol.lam_ineq]))
    else:
        st.warm.pop(tag, None)
    return prob, sol, ok


def _clip_move(u, u_prev, sets: ConstraintSets):
    u = np.clip(u, sets.u_lb, sets.u_ub)
    u = np.clip(u, u_prev + sets.du_lb, u_prev + sets.du_ub)
    return np.clip(u, sets.u_lb, sets.u_ub)


def _apply_solution(prob, sol, ok, st: ControllerState, sets: ConstraintSets):
    if not ok:
        # hold the previous input for one interval; next step cold-starts
        u = st.previous_input.copy()
        diag = StepDiagnostics(status=sol.status, kkt=sol.kkt_residual,
                               iterations=sol.iterations, cost=sol.cost_star,
                               fallback=True)
    else:
        mc = len(st.previous_input)
        u = sol.v_star[prob.var_layout["controls"]][:mc].copy()
        slack_max = 0.0
        if "slacks" in prob.var_layout:
            slack_max = float(np.max(sol.v_star[prob.var_layout["slacks"]],
                                     initial=0.0))
        diag = StepDiagnostics(status=sol.status, kkt=sol.kkt_residual,
                               iterations=sol.iterations, cost=sol.cost_star,
                               slack_max=slack_max)
    u_raw = u
    u = _clip_move(u, st.previous_input, sets)
    # saturated means the raw demand had to be clipped to the actuator set;
    # a solution riding a bound the optimizer already respects is not counted
    diag.saturated = bool(np.any(u_raw < sets.u_lb - 1e-9)
                          or np.any(u_raw > sets.u_ub + 1e-9))
    st.previous_input = u.copy()
    st.step_index += 1
    return u, diag


def _make_slack(slack_spec):
    """slack_spec: list of (state index, soft lb, soft ub)."""
    if not slack_spec:
        return None
    idx = [s[0] for s in slack_spec]
    lo = np.array([s[1] for s in slack_spec], dtype=float)
    hi = np.array([s[2] for s in slack_spec], dtype=float)
    return SlackConfig(indices=idx, soft_lb=lo, soft_ub=hi, weight=SLACK_WEIGHT)


# ---------------------------------------------------------------------------
# controller steps


def classical_step(x0, refs, d_known, sets: ConstraintSets, w: CostWeights,
                   st: ControllerState, dyn: IntervalDynamics,
                   hp: int, hc: int, slack_spec=None, x_scale=None):
    """One classical NMPC move: output tracking from the measured state.

    refs: (Hp, p) stage references for nodes 1..Hp. d_known: (Hp, m) known
    feed flows per interval (controllable column ignored). Returns
    (applied flow (mc,), StepDiagnostics).
    """
    x0 = np.asarray(x0, dtype=float)
    dyn.d_known = np.asarray(d_known, dtype=float)
    if x_scale is None:
        x_scale = _default_x_scale(dyn.cfg)
    cost = TrackingCostModel(dyn, refs, w)
    ocp = OcpSpec(horizon=hp, control_horizon=hc, interval=dyn.tc,
                  dynamics=dyn, x0=x0, cost=cost,
                  state_bounds=(sets.x_lb, sets.x_ub),
                  input_bounds=(sets.u_lb, sets.u_ub),
                  delta_input_bounds=(sets.du_lb, sets.du_ub),
                  u_prev=st.previous_input,
                  slack_config=_make_slack(slack_spec),
                  x_scale=x_scale, u_scale=0.5 * (sets.u_ub - sets.u_lb))
    prob, sol, ok = _solve_ocp(ocp, st, "classical", dyn)
    return _apply_solution(prob, sol, ok, st, sets)


def nominal_solve(z0, refs, d_ref, sets: ConstraintSets, w: CostWeights,
                  st: ControllerState, dyn: IntervalDynamics,
                  hp: int, hc: int, slack_spec=None,
                  x_scale=None) -> TubeSolution:
    """Solve the undisturbed nominal problem from z0; returns the tube center
    (z*, nu*) over the horizon. Raises SolverFailure when no usable point is
    found."""
    z0 = np.asarray(z0, dtype=float)
    dyn.d_known = np.asarray(d_ref, dtype=float)
    if x_scale is None:
        x_scale = _default_x_scale(dyn.cfg)
    cost = TrackingCostModel(dyn, refs, w)
    ocp = OcpSpec(horizon=hp, control_horizon=hc, interval=dyn.tc,
                  dynamics=dyn, x0=z0, cost=cost,
                  state_bounds=(sets.x_lb, sets.x_ub),
                  input_bounds=(sets.u_lb, sets.u_ub),
                  delta_input_bounds=(sets.du_lb, sets.du_ub),
                  u_prev=None,
                  slack_config=_make_slack(slack_spec),
                  x_scale=x_scale, u_scale=0.5 * (sets.u_ub - sets.u_lb))
    prob, sol, ok = _solve_ocp(ocp, st, "nominal", dyn)
    if not ok:
        raise SolverFailure(
            f"nominal problem: status={sol.status} kkt={sol.kkt_residual:.2e}")
    mc = dyn.mc
    moves = sol.v_star[prob.var_layout["controls"]].reshape(hc, mc)
    nu = np.vstack([moves[min(k, hc - 1)] for k in range(hp)])
    z_nodes = sol.v_star[prob.var_layout["states"]].reshape(hp, dyn.n)
    z_star = np.vstack([z0[None, :], z_nodes])
    return TubeSolution(z_star=z_star, nu_star=nu)


def ancillary_step(x0, tube: TubeSolution, y_ref_hp, sets: ConstraintSets,
                   w: CostWeights, online: bool, st: ControllerState,
                   dyn: IntervalDynamics, hp: int, hc: int,
                   d_known=None, slack_spec=None, x_scale=None,
                   nominal_dyn=None, z_bounds=None):
    """One ancillary move tracking the tube center.

    Offline mode: z* is fixed (a slice of the precomputed store). Online mode:
    z0* is an extra decision variable bounded by the tightened state set and
    the chain z_t(z0*) is regenerated inside the cost under nu*; the optimal
    z0* is stored on st for the next nominal problem.
    """
    x0 = np.asarray(x0, dtype=float)
    if d_known is not None:
        dyn.d_known = np.asarray(d_known, dtype=float)
    if x_scale is None:
        x_scale = _default_x_scale(dyn.cfg)
    cost = AncillaryCostModel(
        dyn, tube, y_ref_hp, w, x_scale, 0.5 * (sets.u_ub - sets.u_lb),
        nominal_dyn=nominal_dyn if online else None,
        chain_bounds=z_bounds if online else None)
    ocp = OcpSpec(horizon=hp, control_horizon=hc, interval=dyn.tc,
                  dynamics=dyn, x0=x0, cost=cost,
                  state_bounds=(sets.x_lb, sets.x_ub),
                  input_bounds=(sets.u_lb, sets.u_ub),
                  delta_input_bounds=(sets.du_lb, sets.du_ub),
                  u_prev=st.previous_input,
                  slack_config=_make_slack(slack_spec),
                  extra_initial_state_dof=online,
                  initial_state_bounds=z_bounds if online else None,
                  x_scale=x_scale, u_scale=0.5 * (sets.u_ub - sets.u_lb))
    tag = "ancillary_online" if online else "ancillary"
    prob, sol, ok = _solve_ocp(ocp, st, tag, dyn)
    if ok and online:
        st.z0_star = sol.v_star[prob.var_layout["z0"]].copy()
    return _apply_solution(prob, sol, ok, st, sets)


def online_tube_step(x0, refs, d_ref, d_known, nominal_sets: ConstraintSets,
                     sets: ConstraintSets, w_nominal: CostWeights,
                     w: CostWeights, st: ControllerState,
                     nominal_dyn: IntervalDynamics, dyn: IntervalDynamics,
                     hp: int, hc: int, slack_spec=None,
                     nominal_slack_spec=None, x_scale=None):
    """Nominal solve from the fed-back z0*, then the online ancillary step.

    On SolverFailure of the nominal stage the previous input is held and the
    chain state is left untouched (retried next step).
    """
    if st.z0_star is None:
        raise ValueError("online tube needs st.z0_star initialized "
                         "(steady-state values)")
    try:
        tube = nominal_solve(st.z0_star, refs, d_ref, nominal_sets, w_nominal,
                             st, nominal_dyn, hp, hc,
                             slack_spec=nominal_slack_spec, x_scale=x_scale)
    except SolverFailure:
        u = st.previous_input.copy()
        st.step_index += 1
        return u, StepDiagnostics(status="nominal_failed", kkt=np.inf,
                                  iterations=0, cost=np.nan, fallback=True)
    u, diag = ancillary_step(
        x0, tube, refs[-1], sets, w, True, st, dyn, hp, hc,
        d_known=d_known, slack_spec=slack_spec, x_scale=x_scale,
        nominal_dyn=nominal_dyn,
        z_bounds=(nominal_sets.x_lb, nominal_sets.x_ub))
    if st.z0_star is not None and not diag.fallback:
        # advance the re-optimized chain one interval under the applied
        # nominal move: it becomes the next nominal initial condition
        st.z0_star = nominal_dyn.step_nosens(0, st.z0_star, tube.nu_star[0])
    return u, diag


@dataclass
class PiGains:
    kp1: float   # q_M loop, (L/d) per (mmol/L/d)
    ki1: float   # 1/d
    kp2: float   # ratio loop, L/d per unit ratio (negative-acting)
    ki2: float
    u_ss: float  # feedforward steady input, L/d
    ratio_setpoint: float


def override_pi_step(y_meas, qm_ref: float, gains: PiGains,
                     sets: ConstraintSets, st: ControllerState, tc: float):
    """Low-select override of two PI loops: PI-1 tracks the methane reference,
    PI-2 holds the CO2/CH4 ratio below its safety setpoint. The applied flow
    is min(u1, u2) clamped to the input set, with conditional-integration
    anti-windup."""
    y = np.asarray(y_meas, dtype=float)
    e1 = qm_ref - y[0]
    e2 = gains.ratio_setpoint - y[1]
    i1, i2 = st.pi_integrals
    u1 = gains.u_ss + gains.kp1 * e1 + gains.ki1 * (i1 + e1 * tc)
    u2 = gains.u_ss + gains.kp2 * e2 + gains.ki2 * (i2 + e2 * tc)
    u_sel = min(u1, u2)
    u = float(np.clip(u_sel, sets.u_lb[0], sets.u_ub[0]))
    # integrate only the selected, unsaturated loop (clamping anti-windup)
    if u_sel == u1 and sets.u_lb[0] < u1 < sets.u_ub[0]:
        i1 += e1 * tc
    if u_sel == u2 and sets.u_lb[0] < u2 < sets.u_ub[0]:
        i2 += e2 * tc
    st.pi_integrals = np.array([i1, i2])
    applied = np.array([u])
    # saturated when the selected demand lies outside the actuator set
    saturated = bool(u_sel < sets.u_lb[0] - 1e-9
                     or u_sel > sets.u_ub[0] + 1e-9)
    st.previous_input = applied.copy()
    st.step_index += 1
    return applied, StepDiagnostics(status="pi", kkt=0.0, iterations=0,
                                    cost=0.0, saturated=saturated)


def offline_tube_precompute(z0, refs_full, d_ref_full, sets: ConstraintSets,
                            w: CostWeights, dyn: IntervalDynamics,
                            hp: int, hc: int, slack_spec=None,
                            x_scale=None) -> TubeSolution:
    """Run the nominal controller in closed loop on the undisturbed model over
    the whole scenario; the stitched (z*, nu*) trajectories are stored once
    and sliced by the ancillary controller afterwards.

    refs_full: (n_steps + Hp, p) references padded past the scenario end.
    d_ref_full: (n_steps + Hp, m) reference flows, same padding.
    """
    z0 = np.asarray(z0, dtype=float)
    n_steps = refs_full.shape[0] - hp
    st = ControllerState(mode="nominal", previous_input=np.zeros(dyn.mc))
    z_traj = np.empty((n_steps + 1, dyn.n))
    nu_traj = np.empty((n_steps, dyn.mc))
    z = z0.copy()
    z_traj[0] = z
    for k in range(n_steps):
        tube = nominal_solve(z, refs_full[k + 1:k + 1 + hp],
                             d_ref_full[k:k + hp], sets, w, st, dyn, hp, hc,
                             slack_spec=slack_spec, x_scale=x_scale)
        nu = tube.nu_star[0]
        dyn.d_known = d_ref_full[k:k + hp]
        z = dyn.step_nosens(0, z, nu)
        st.previous_input = nu.copy()
        nu_traj[k] = nu
        z_traj[k + 1] = z
    return TubeSolution(z_star=z_traj, nu_star=nu_traj)


def tube_slice(store: TubeSolution, k: int, hp: int) -> TubeSolution:
    """Horizon-length window of the offline store starting at step k, edge
    values repeated past the scenario end."""
    n_steps = store.nu_star.shape[0]
    idx_z = np.minimum(np.arange(k, k + hp + 1), n_steps)
    idx_nu = np.minimum(np.arange(k, k + hp), n_steps - 1)
    return TubeSolution(z_star=store.z_star[idx_z],
                        nu_star=store.nu_star[idx_nu])
