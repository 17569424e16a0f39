"""Closed-loop experiment harness: diet and reference construction,
uncertainty sampling, knockdown disturbance, closed-loop execution and the
Monte-Carlo batch with paired seeds.

Pairing contract: realization i (kinetic sample, noise stream, knockdown
sample) is a deterministic function of (seed, i) only, so every controller
compared on a batch sees identical disturbances; the realization hash is
recorded per run for auditing.
"""

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .controllers import (AncillaryCostModel, ConstraintSets, ControllerState,
                          CostWeights, IntervalDynamics, PiGains,
                          TubeSolution, ancillary_step, classical_step,
                          offline_tube_precompute, online_tube_step,
                          override_pi_step, tube_slice)
from .errors import NonFiniteState
from .integrator import (DEFAULT_SUBSTEP, PULSE_DURATION, FeedEntry,
                         FeedSchedule, constant_schedule, simulate_interval)
from .model import KineticParams, ReactorConfig

# stream tags keeping the kinetic, noise and knockdown draws independent
_STREAM_KINETICS = 101
_STREAM_NOISE = 202
_STREAM_KNOCKDOWN = 303

# truncation of the kinetic Gaussian (relative to the nominal value)
KIN_TRUNC_LO = 0.05
KIN_TRUNC_HI = 3.0

# knockdown sampling clips: keep the worst draw survivable by a feed cut and
# the mildest one still a genuine disturbance
KNOCK_AMP_CLIP = (0.45, 0.80)
KNOCK_DUR_CLIP = (3.0, 10.0)

DOSES_PER_WEEK = 3  # manual feeding cadence in impulsive scenarios

# acetoclastic-activity estimator (offset-free scheme): the ratio of the
# measured methane flow to the nominal model's prediction at the same state
# identifies the effective mu2 scale (kinetic mismatch and activity
# knockdowns alike); the filtered, clipped estimate scales mu2 inside the
# plant-facing prediction models, so tracking has no permanent bias and a
# knockdown shows up in the predicted S2 rise. The tube-center (nominal)
# problem is never corrected.
MU2_FACTOR_GAIN = 0.3
MU2_FACTOR_CLIP = (0.1, 5.0)


@dataclass
class DietPlan:
    """Piecewise-steady feeding plan with linear ramps between phases."""
    phases: list  # [(duration d, flows (m,) L/d), ...]
    transition: float = 0.0  # ramp duration between consecutive phases, d

    def __post_init__(self):
        self.phases = [(float(d), np.asarray(f, dtype=float))
                       for d, f in self.phases]
        for d, f in self.phases:
            if d <= 0:
                raise ValueError("phase durations must be positive")
            if np.any(f < 0):
                raise ValueError("phase loadings must be nonnegative")
        if self.transition < 0:
            raise ValueError("transition must be nonnegative")

    @property
    def total_days(self) -> float:
        return (sum(d for d, _ in self.phases)
                + self.transition * (len(self.phases) - 1))

    def flows_at(self, t: float) -> np.ndarray:
        """Target flows at time t; past the end the last phase persists."""
        pos = 0.0
        for i, (dur, f) in enumerate(self.phases):
            if t < pos + dur or i == len(self.phases) - 1:
                return f.copy()
            pos += dur
            if t < pos + self.transition:
                f_next = self.phases[i + 1][1]
                frac = (t - pos) / self.transition
                return f + (f_next - f) * frac
            pos += self.transition
        return self.phases[-1][1].copy()

    def transition_window(self, index: int = 0):
        """(start, end) of the ramp after phase `index`."""
        pos = sum(self.phases[j][0] for j in range(index + 1))
        pos += self.transition * index
        return pos, pos + self.transition


@dataclass
class UncertaintyConfig:
    kinetic_rel_std: float = 0.20
    noise_rel_std: np.ndarray = field(
        default_factory=lambda: np.array([0.05, 0.02]))
    n_runs: int = 10
    seed: int = 0

    def __post_init__(self):
        self.noise_rel_std = np.asarray(self.noise_rel_std, dtype=float)
        if self.kinetic_rel_std < 0 or np.any(self.noise_rel_std < 0):
            raise ValueError("standard deviations must be nonnegative")
        if self.n_runs < 1:
            raise ValueError("n_runs must be at least 1")


@dataclass
class KnockdownConfig:
    """Trapezoidal temporary reduction of the methanogens' maximum growth
    rate, centered in the diet transition."""
    enabled: bool = False
    amplitude_mean: float = 0.60
    duration_mean: float = 7.0
    amplitude_rel_std: float = 0.07
    duration_rel_std_days: float = 1.0
    ramp_edges: float = 0.5
    center: Optional[float] = None  # d; None = mid-transition, set by caller

    def __post_init__(self):
        if not 0.0 <= self.amplitude_mean < 1.0:
            raise ValueError("amplitude must lie in [0, 1)")
        if self.duration_mean <= 0:
            raise ValueError("duration must be positive")


@dataclass
class MetricsReport:
    rmse_rel: np.ndarray       # %, per output, averaged over successful runs
    sigma_bar_s2: float        # mmol/L, mean deviation from the central path
    sigma_max_s2: float        # mmol/L, max deviation
    s2_max: float              # mmol/L
    ratio_max: float
    n_runs: int
    n_failed: int
    central_s2: np.ndarray     # the cross-run mean S2 path (control grid)
    per_run_rmse: np.ndarray   # (n_ok, p)

    def __post_init__(self):
        if self.sigma_bar_s2 > self.sigma_max_s2 + 1e-12:
            raise ValueError("sigma_bar exceeds sigma_max")


@dataclass
class ReferenceSet:
    """Nominal references on the control grid, padded Hp intervals past the
    scenario end so horizon slices never run off the arrays."""
    times: np.ndarray        # (n_steps+1,) control-grid nodes over the scenario
    d_ref: np.ndarray        # (n_steps+hp, m) per-interval reference flows
    y_ref: np.ndarray        # (n_steps+hp+1, p) nominal outputs at the nodes
    x_ref: np.ndarray        # (n_steps+hp+1, n) nominal states at the nodes
    x0: np.ndarray           # phase-1 equilibrium state
    u0: np.ndarray           # phase-1 equilibrium flows (m,)
    equilibria: list         # [(x_bar, u_bar)] per steady phase
    ybar: np.ndarray         # time-mean of y_ref over the scenario window

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1


@dataclass
class Realization:
    run_index: int
    params: KineticParams
    noise_seed: int
    knock_amplitude: float  # 0 when knockdown disabled
    knock_duration: float
    digest: str


@dataclass
class RunResult:
    times: np.ndarray        # control grid
    states: np.ndarray       # (n_steps+1, n)
    y_true: np.ndarray       # (n_steps+1, p)
    y_meas: np.ndarray       # noisy copy used for logging / the PI loops
    u_applied: np.ndarray    # (n_steps, mc) controllable flow
    flows_applied: np.ndarray  # (n_steps, m) interval-average flows
    slack_max: np.ndarray    # (n_steps,)
    saturated: np.ndarray    # (n_steps,) bool
    fallbacks: int
    failed: bool
    fail_reason: str
    realization_digest: str
    clamped_mass: float
    n_completed: int = 0     # steps finished; < n_steps only on failure
    infeasible_events: int = 0  # solver-reported infeasibility (slacks failing)


# ---------------------------------------------------------------------------
# scenario ingredients


def equilibrate(cfg: ReactorConfig, p: KineticParams, flows, x_start=None,
                days: float = 400.0, substep: float = DEFAULT_SUBSTEP):
    """Settle the nominal model under constant flows; returns the end state.

    Raises NonFiniteState if the simulation blows up; convergence is checked
    loosely (relative drift of the last day below 1e-7)."""
    if x_start is None:
        x_start = np.concatenate([np.ones(cfg.m),
                                  [1.0, 1.0, 1.0, 10.0, 50.0, 80.0]])
    sched = constant_schedule(flows, 0.0, days)
    tr = simulate_interval(np.asarray(x_start, float), sched, 0.0, days, cfg,
                           p, substep=substep)
    drift = np.max(np.abs(tr.states[-1] - tr.states[-41])
                   / np.maximum(np.abs(tr.states[-1]), 1e-9))
    if drift > 1e-6:
        # not yet settled: extend once
        tr2 = simulate_interval(tr.states[-1], sched.shifted(0.0), 0.0, days,
                                cfg, p, substep=substep)
        return tr2.states[-1]
    return tr.states[-1]


def build_references(diet: DietPlan, cfg: ReactorConfig, p: KineticParams,
                     tc: float, hp: int,
                     substep: float = DEFAULT_SUBSTEP) -> ReferenceSet:
    """References from the undisturbed nominal model: equilibrate on phase 1,
    then simulate the diet (continuous realization) on the control grid."""
    m = cfg.m
    for _, f in diet.phases:
        if f.shape != (m,):
            raise ValueError("diet loadings must have one entry per feedstock")
    n_steps = int(round(diet.total_days / tc))
    total = n_steps + hp
    d_ref = np.empty((total, m))
    for k in range(total):
        d_ref[k] = diet.flows_at((k + 0.5) * tc)

    equilibria = []
    pos = 0.0
    x_prev = None
    for dur, f in diet.phases:
        x_eq = equilibrate(cfg, p, f, x_start=x_prev, substep=substep)
        equilibria.append((x_eq, f.copy()))
        x_prev = x_eq
        pos += dur + diet.transition
    x0 = equilibria[0][0]
    u0 = diet.phases[0][1].copy()

    kin = p.pack()
    theta = cfg.theta_u_matrix
    n_sub = int(round(tc / substep))
    ones = np.ones(n_sub)
    x_ref = np.empty((total + 1, cfg.n))
    y_ref = np.empty((total + 1, 2))
    x_ref[0] = x0
    y_ref[0] = kernels.output_vec(x0, kin, m, 1.0)
    x = x0.copy()
    for k in range(total):
        flows = np.tile(d_ref[k], (n_sub, 1))
        traj, _ = kernels.rk4_interval(x, flows, ones, substep, theta,
                                       p.k_hyd, kin, cfg.volume, True)
        x = traj[-1]
        if not np.all(np.isfinite(x)):
            raise NonFiniteState("reference simulation diverged")
        x_ref[k + 1] = x
        y_ref[k + 1] = kernels.output_vec(x, kin, m, 1.0)

    times = np.arange(n_steps + 1) * tc
    ybar = np.maximum(y_ref[: n_steps + 1].mean(axis=0), 1e-6)
    return ReferenceSet(times=times, d_ref=d_ref, y_ref=y_ref, x_ref=x_ref,
                        x0=x0, u0=u0, equilibria=equilibria, ybar=ybar)


def _rng(seed: int, stream: int, run_index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(stream, run_index)))


def sample_kinetics(base: KineticParams, cfg: UncertaintyConfig,
                    run_index: int) -> KineticParams:
    """Gaussian draw of the Haldane kinetic subset, truncated to
    (0.05, 3) x nominal, deterministic in (seed, run_index)."""
    if cfg.kinetic_rel_std == 0.0:
        return base
    rng = _rng(cfg.seed, _STREAM_KINETICS, run_index)
    theta = base.theta_kin
    out = np.empty_like(theta)
    for i, th in enumerate(theta):
        lo, hi = KIN_TRUNC_LO * th, KIN_TRUNC_HI * th
        val = rng.normal(th, cfg.kinetic_rel_std * th)
        for _ in range(200):
            if lo < val < hi:
                break
            val = rng.normal(th, cfg.kinetic_rel_std * th)
        else:
            val = float(np.clip(val, lo, hi))
        out[i] = val
    return base.with_theta_kin(out)


def apply_noise(y, cfg: UncertaintyConfig, seed: int, t_index: int):
    """Multiplicative relative measurement noise, clamped at zero."""
    y = np.asarray(y, dtype=float)
    if np.all(cfg.noise_rel_std == 0.0):
        return y.copy()
    rng = _rng(seed, _STREAM_NOISE, t_index)
    eps = rng.normal(0.0, 1.0, size=y.shape) * cfg.noise_rel_std
    return np.maximum(y * (1.0 + eps), 0.0)


def sample_knockdown(k: KnockdownConfig, seed: int, run_index: int):
    """(amplitude, duration) draw for one run; (0, dur) when disabled."""
    if not k.enabled:
        return 0.0, k.duration_mean
    rng = _rng(seed, _STREAM_KNOCKDOWN, run_index)
    amp = rng.normal(k.amplitude_mean, k.amplitude_rel_std * k.amplitude_mean)
    dur = rng.normal(k.duration_mean, k.duration_rel_std_days)
    amp = float(np.clip(amp, *KNOCK_AMP_CLIP))
    dur = float(np.clip(dur, *KNOCK_DUR_CLIP))
    return amp, dur


def knockdown_factor(k: KnockdownConfig, amplitude: float, duration: float,
                     t: float) -> float:
    """Trapezoid value at time t for sampled (amplitude, duration)."""
    if amplitude <= 0.0 or k.center is None:
        return 1.0
    h0 = k.center - duration / 2.0
    h1 = k.center + duration / 2.0
    e = k.ramp_edges
    if t <= h0 - e or t >= h1 + e:
        return 1.0
    if t < h0:
        return 1.0 - amplitude * (t - (h0 - e)) / e
    if t > h1:
        return 1.0 - amplitude * ((h1 + e) - t) / e
    return 1.0 - amplitude


def knockdown_profile(k: KnockdownConfig, seed: int, run_index: int,
                      t: float) -> float:
    """Multiplicative mu_max2 factor at time t for the run's sampled window."""
    amp, dur = sample_knockdown(k, seed, run_index)
    return knockdown_factor(k, amp, dur, t)


def make_realization(base: KineticParams, ucfg: UncertaintyConfig,
                     kcfg: KnockdownConfig, run_index: int) -> Realization:
    params = sample_kinetics(base, ucfg, run_index)
    amp, dur = sample_knockdown(kcfg, ucfg.seed, run_index)
    h = hashlib.sha256()
    h.update(params.theta_kin.tobytes())
    h.update(np.array([amp, dur, float(ucfg.seed), float(run_index)]).tobytes())
    h.update(ucfg.noise_rel_std.tobytes())
    return Realization(run_index=run_index, params=params,
                       noise_seed=ucfg.seed, knock_amplitude=amp,
                       knock_duration=dur, digest=h.hexdigest())


# ---------------------------------------------------------------------------
# closed loop


def impulsive_schedule(diet: DietPlan, keep, total_days: float,
                       m: int) -> FeedSchedule:
    """Rectangular-pulse realization of manual dosing for the feedstocks
    selected by `keep` (boolean mask): one dose every 7/DOSES_PER_WEEK days,
    volume matching the diet's average flow over the dosing period."""
    period = 7.0 / DOSES_PER_WEEK
    entries = []
    t = 0.0
    while t < total_days - 1e-9:
        avg = diet.flows_at(t + 0.5 * period)
        flows = np.where(keep, avg, 0.0) * (period / PULSE_DURATION)
        if np.any(flows > 0):
            entries.append(FeedEntry(t, PULSE_DURATION, flows, kind="pulse"))
        t += period
    return FeedSchedule(entries)


class _Plant:
    """The disturbed plant: sampled kinetics, knockdown on mu_max2, optional
    impulsive feeding of the uncontrollable feedstocks."""

    def __init__(self, cfg, realization: Realization, kcfg: KnockdownConfig,
                 diet: DietPlan, feeding: str, tc: float, n_steps: int,
                 d_ref, substep: float):
        self.cfg = cfg
        self.p = realization.params
        self.kin = self.p.pack()
        self.theta = cfg.theta_u_matrix
        self.kcfg = kcfg
        self.amp = realization.knock_amplitude
        self.dur = realization.knock_duration
        self.tc = tc
        self.substep = substep
        self.n_sub = int(round(tc / substep))
        self.ci = cfg.controllable_index
        total_days = n_steps * tc
        n_sub_total = n_steps * self.n_sub
        mids = (np.arange(n_sub_total) + 0.5) * substep
        self.mu2f = np.array([knockdown_factor(kcfg, self.amp, self.dur, t)
                              for t in mids])
        if feeding == "impulsive":
            keep = np.ones(cfg.m, dtype=bool)
            keep[self.ci] = False
            sched = impulsive_schedule(diet, keep, total_days, cfg.m)
            self.other_flows = sched.flows_on_grid(0.0, total_days, substep)
        else:
            self.other_flows = np.repeat(d_ref[:n_steps], self.n_sub, axis=0)
        self.clamped = 0.0

    def factor_at_node(self, k: int) -> float:
        t = k * self.tc
        return knockdown_factor(self.kcfg, self.amp, self.dur, t)

    def advance(self, k: int, x, u):
        """Simulate control interval k under applied controllable flow u."""
        s = k * self.n_sub
        flows = self.other_flows[s:s + self.n_sub].copy()
        flows[:, self.ci] = u[0]
        traj, clamped = kernels.rk4_interval(
            np.asarray(x, float), flows, self.mu2f[s:s + self.n_sub],
            self.substep, self.theta, self.p.k_hyd, self.kin,
            self.cfg.volume, True)
        self.clamped += clamped
        x_next = traj[-1]
        if not np.all(np.isfinite(x_next)):
            raise NonFiniteState(f"plant diverged in interval {k}")
        return x_next, flows.mean(axis=0)

    def measure(self, k: int, x):
        return kernels.output_vec(np.asarray(x, float), self.kin, self.cfg.m,
                                  self.factor_at_node(k))


def run_closed_loop(scn, controller_mode: str, realization: Realization,
                    refs: ReferenceSet,
                    offline_store: Optional[TubeSolution] = None) -> RunResult:
    """One closed-loop run: alternate controller step and plant simulation.

    scn is a config.Scenario (duck-typed here: the harness only reads its
    plain fields and set-assembly helpers). NMPC controllers read the true
    plant state; the noisy outputs drive the PI baseline and the logs.
    """
    n_steps = refs.n_steps
    cfg, p_nom = scn.cfg, scn.params
    plant = _Plant(cfg, realization, scn.knockdown, scn.diet, scn.feeding,
                   scn.tc, n_steps, refs.d_ref, scn.plant_substep)

    x_scale = np.maximum(refs.x0, 0.1)
    w = scn.weights(refs.ybar)
    sets = scn.ancillary_sets()
    nsets = scn.nominal_sets()
    slack_spec = scn.slack_spec()
    dyn = IntervalDynamics(cfg, p_nom, refs.d_ref[:scn.hp], scn.tc,
                           substep=scn.substep)
    nominal_dyn = IntervalDynamics(cfg, p_nom, refs.d_ref[:scn.hp], scn.tc,
                                   substep=scn.substep)

    u0 = np.array([refs.u0[cfg.controllable_index]])
    st = ControllerState(mode=controller_mode, previous_input=u0.copy())
    if controller_mode == "online-tube":
        st.z0_star = refs.x0.copy()
    if controller_mode == "offline-tube" and offline_store is None:
        offline_store = precompute_offline(scn, refs)
    gains = scn.pi_gains(refs) if controller_mode == "override-pi" else None

    x = refs.x0.copy()
    times = refs.times
    states = np.empty((n_steps + 1, cfg.n))
    y_true = np.empty((n_steps + 1, 2))
    y_meas = np.empty((n_steps + 1, 2))
    u_applied = np.empty((n_steps, dyn.mc))
    flows_applied = np.empty((n_steps, cfg.m))
    slack_max = np.zeros(n_steps)
    saturated = np.zeros(n_steps, dtype=bool)
    fallbacks = 0
    infeasible = 0
    failed = False
    reason = ""
    completed = 0

    states[0] = x
    y_true[0] = plant.measure(0, x)
    y_meas[0] = apply_noise(y_true[0], scn.uncertainty, realization.noise_seed,
                            realization.run_index * 100000)

    mu2f_hat = 1.0  # estimated mu2 activity relative to the nominal model
    try:
        for k in range(n_steps):
            refs_k = refs.y_ref[k + 1:k + 1 + scn.hp]
            d_k = refs.d_ref[k:k + scn.hp]
            if controller_mode != "override-pi":
                qm_nom = dyn.output(x, mu2_factor=1.0)[0]
                raw = np.clip(y_meas[k][0] / max(qm_nom, 1e-9),
                              *MU2_FACTOR_CLIP)
                mu2f_hat = ((1.0 - MU2_FACTOR_GAIN) * mu2f_hat
                            + MU2_FACTOR_GAIN * raw)
                dyn.set_mu2_factor(mu2f_hat)
            if controller_mode == "classical":
                u, diag = classical_step(x, refs_k, d_k, sets, w, st, dyn,
                                         scn.hp, scn.hc,
                                         slack_spec=slack_spec,
                                         x_scale=x_scale)
            elif controller_mode == "offline-tube":
                tube = tube_slice(offline_store, k, scn.hp)
                u, diag = ancillary_step(x, tube, refs_k[-1], sets, w,
                                         False, st, dyn, scn.hp, scn.hc,
                                         d_known=d_k, slack_spec=slack_spec,
                                         x_scale=x_scale)
            elif controller_mode == "online-tube":
                u, diag = online_tube_step(
                    x, refs_k, d_k, d_k, nsets, sets, scn.nominal_weights(refs.ybar),
                    w, st, nominal_dyn, dyn, scn.hp, scn.hc,
                    slack_spec=slack_spec,
                    nominal_slack_spec=scn.nominal_slack_spec(),
                    x_scale=x_scale)
            elif controller_mode == "override-pi":
                gains.u_ss = refs.d_ref[k][cfg.controllable_index]
                u, diag = override_pi_step(y_meas[k], refs.y_ref[k][0], gains,
                                           sets, st, scn.tc)
            else:
                raise ValueError(f"unknown controller {controller_mode!r}")

            x, mean_flows = plant.advance(k, x, u)
            u_applied[k] = u
            flows_applied[k] = mean_flows
            slack_max[k] = diag.slack_max
            saturated[k] = diag.saturated
            fallbacks += int(diag.fallback)
            infeasible += int(diag.status == "infeasible")
            states[k + 1] = x
            y_true[k + 1] = plant.measure(k + 1, x)
            y_meas[k + 1] = apply_noise(
                y_true[k + 1], scn.uncertainty, realization.noise_seed,
                realization.run_index * 100000 + k + 1)
            completed = k + 1
    except NonFiniteState as exc:
        failed = True
        reason = str(exc)

    return RunResult(times=times, states=states, y_true=y_true, y_meas=y_meas,
                     u_applied=u_applied, flows_applied=flows_applied,
                     slack_max=slack_max, saturated=saturated,
                     fallbacks=fallbacks, infeasible_events=infeasible,
                     failed=failed, fail_reason=reason,
                     realization_digest=realization.digest,
                     clamped_mass=plant.clamped, n_completed=completed)


def precompute_offline(scn, refs: ReferenceSet) -> TubeSolution:
    """The offline tube center: nominal receding-horizon loop over the whole
    scenario; independent of any realization, so shared across a batch."""
    dyn = IntervalDynamics(scn.cfg, scn.params, refs.d_ref[:scn.hp], scn.tc,
                           substep=scn.substep)
    x_scale = np.maximum(refs.x0, 0.1)
    refs_full = refs.y_ref[1:]
    return offline_tube_precompute(
        refs.x0, refs_full, refs.d_ref, scn.nominal_sets(),
        scn.nominal_weights(refs.ybar), dyn, scn.hp, scn.hc,
        slack_spec=scn.nominal_slack_spec(), x_scale=x_scale)


# ---------------------------------------------------------------------------
# metrics and the Monte-Carlo batch


def compute_metrics(runs, y_ref, ybar, s2_index: int) -> MetricsReport:
    """Tracking and robustness statistics over the successful runs.

    Central path = cross-run pointwise mean of S2 on the control grid.
    rmse_rel per output per run = 100 sqrt(mean_t ((y - y_ref)/ybar)^2),
    averaged over runs.
    """
    ok = [r for r in runs if not r.failed]
    if not ok:
        raise ValueError("no successful runs to aggregate")
    n_pts = len(ok[0].times)
    s2 = np.stack([r.states[:, s2_index] for r in ok])
    central = s2.mean(axis=0)
    dev = np.abs(s2 - central[None, :])
    y_ref_grid = y_ref[:n_pts]
    per_run = []
    for r in ok:
        e = (r.y_true - y_ref_grid) / ybar
        per_run.append(100.0 * np.sqrt(np.mean(e * e, axis=0)))
    per_run = np.stack(per_run)
    ratio_max = float(max(np.max(r.y_true[:, 1]) for r in ok))
    return MetricsReport(
        rmse_rel=per_run.mean(axis=0),
        sigma_bar_s2=float(dev.mean()),
        sigma_max_s2=float(dev.max()),
        s2_max=float(s2.max()),
        ratio_max=ratio_max,
        n_runs=len(runs), n_failed=len(runs) - len(ok),
        central_s2=central, per_run_rmse=per_run)


def monte_carlo(scn, controller_modes, refs: ReferenceSet, n_workers: int = 1):
    """Paired Monte-Carlo batch: one realization per run index, reused by
    every controller. Returns ({mode: MetricsReport}, {mode: [RunResult]},
    [Realization]).

    Runs are independent; with n_workers > 1 they are fanned out over a
    thread pool and collected in run-index order, so the results are
    identical to the sequential ones."""
    ucfg = scn.uncertainty
    realizations = [make_realization(scn.params, ucfg, scn.knockdown, i)
                    for i in range(ucfg.n_runs)]
    s2_index = scn.cfg.m + 3
    reports = {}
    all_runs = {}
    for mode in dict.fromkeys(controller_modes):
        store = precompute_offline(scn, refs) if mode == "offline-tube" else None
        if n_workers > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(max_workers=n_workers) as pool:
                runs = list(pool.map(
                    lambda rz: run_closed_loop(scn, mode, rz, refs,
                                               offline_store=store),
                    realizations))
        else:
            runs = [run_closed_loop(scn, mode, rz, refs, offline_store=store)
                    for rz in realizations]
        all_runs[mode] = runs
        reports[mode] = compute_metrics(runs, refs.y_ref, refs.ybar, s2_index)
    return reports, all_runs, realizations
