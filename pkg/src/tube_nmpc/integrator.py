"""Fixed-step RK4 integration of the digester over control intervals.

Manual "impulsive" feeds are realized as rectangular pulses (default duration
0.5 h) so the flows keep entering the ODE through the dilution rate. Tiny
negative overshoots of the explicit scheme are clamped to zero and the clamped
mass is accounted for per trajectory.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import NonFiniteState
from .model import KineticParams, ReactorConfig

DEFAULT_SUBSTEP = 0.025  # d; 10 substeps per 6 h control interval
PULSE_DURATION = 0.5 / 24.0  # d; rectangular realization of a manual dose

_GRID_TOL = 1e-9


@dataclass
class FeedEntry:
    start: float      # d
    duration: float   # d
    flows: np.ndarray  # L/d per feedstock, constant while active
    kind: str = "continuous"  # or "pulse"

    def __post_init__(self):
        self.flows = np.asarray(self.flows, dtype=float)
        if self.duration <= 0:
            raise ValueError("entry duration must be positive")
        if np.any(self.flows < 0):
            raise ValueError("entry flows must be nonnegative")
        if self.kind not in ("continuous", "pulse"):
            raise ValueError(f"unknown entry kind {self.kind!r}")

    @property
    def end(self) -> float:
        return self.start + self.duration


@dataclass
class FeedSchedule:
    entries: list = field(default_factory=list)

    def __post_init__(self):
        # active windows must not overlap for any feedstock
        for i, a in enumerate(self.entries):
            for b in self.entries[i + 1:]:
                if a.start < b.end - _GRID_TOL and b.start < a.end - _GRID_TOL:
                    both = (a.flows > 0) & (b.flows > 0)
                    if np.any(both):
                        raise ValueError(
                            f"overlapping entries at t={max(a.start, b.start)} "
                            f"for feedstock index {int(np.argmax(both))}")

    def flows_at(self, t: float) -> np.ndarray:
        m = self.entries[0].flows.shape[0] if self.entries else 0
        total = np.zeros(m)
        for e in self.entries:
            if e.start - _GRID_TOL <= t < e.end - _GRID_TOL:
                total = total + e.flows
        return total

    def boundaries(self) -> np.ndarray:
        pts = set()
        for e in self.entries:
            pts.add(e.start)
            pts.add(e.end)
        return np.array(sorted(pts))

    def flows_on_grid(self, t0: float, t1: float, substep: float) -> np.ndarray:
        """(n_sub, m) flows sampled at substep midpoints; requires the substep
        grid to resolve every entry boundary inside [t0, t1]."""
        n_sub = int(round((t1 - t0) / substep))
        if abs(n_sub * substep - (t1 - t0)) > _GRID_TOL:
            raise ValueError("substep must divide the interval length")
        for b in self.boundaries():
            if t0 + _GRID_TOL < b < t1 - _GRID_TOL:
                k = (b - t0) / substep
                if abs(k - round(k)) > 1e-6:
                    raise ValueError(
                        f"schedule boundary t={b} not on the substep grid")
        mids = t0 + (np.arange(n_sub) + 0.5) * substep
        return np.stack([self.flows_at(t) for t in mids])

    def shifted(self, dt: float) -> "FeedSchedule":
        return FeedSchedule([FeedEntry(e.start + dt, e.duration,
                                       e.flows.copy(), e.kind)
                             for e in self.entries])


def constant_schedule(flows, t0: float, t1: float) -> FeedSchedule:
    return FeedSchedule([FeedEntry(t0, t1 - t0, np.asarray(flows, float))])


@dataclass
class SimTrajectory:
    times: np.ndarray           # d, strictly increasing
    states: np.ndarray          # (len(times), n)
    outputs: np.ndarray         # (len(times), 2)
    inputs_applied: np.ndarray  # (len(times)-1, m) flows per substep
    clamped_mass: float = 0.0

    def __post_init__(self):
        if not (len(self.times) == len(self.states) == len(self.outputs)
                == len(self.inputs_applied) + 1):
            raise ValueError("trajectory arrays have inconsistent lengths")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    def concat(self, other: "SimTrajectory") -> "SimTrajectory":
        if abs(self.times[-1] - other.times[0]) > _GRID_TOL:
            raise ValueError("trajectories are not contiguous")
        return SimTrajectory(
            times=np.concatenate([self.times, other.times[1:]]),
            states=np.vstack([self.states, other.states[1:]]),
            outputs=np.vstack([self.outputs, other.outputs[1:]]),
            inputs_applied=np.vstack([self.inputs_applied, other.inputs_applied]),
            clamped_mass=self.clamped_mass + other.clamped_mass)


def rk4_step(f, x, flows, dt: float, clamp: bool = True):
    """One classical RK4 step of dx/dt = f(x, flows).

    Returns (x_next, clamped_mass). Components driven below zero are clamped
    to zero when `clamp`, with the clamp magnitude reported.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    k1 = np.asarray(f(x, flows))
    k2 = np.asarray(f(x + 0.5 * dt * k1, flows))
    k3 = np.asarray(f(x + 0.5 * dt * k2, flows))
    k4 = np.asarray(f(x + dt * k3, flows))
    x_next = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(x_next)):
        raise NonFiniteState("non-finite state after RK4 step")
    clamped = 0.0
    if clamp:
        neg = x_next < 0
        clamped = float(-x_next[neg].sum())
        x_next = np.where(neg, 0.0, x_next)
    return x_next, clamped


def simulate_interval(x0, schedule: FeedSchedule, t0: float, t1: float,
                      cfg: ReactorConfig, p: KineticParams,
                      substep: float = DEFAULT_SUBSTEP,
                      mu2_factor_fn=None, clamp: bool = True) -> SimTrajectory:
    """Integrate [t0, t1] under piecewise-constant flows from the schedule.

    mu2_factor_fn(t) -> multiplicative factor on mu_max2, sampled per substep
    (plant-side kinetic knockdown); None means 1 everywhere.
    """
    if t1 <= t0:
        raise ValueError("t1 must exceed t0")
    x0 = np.asarray(x0, dtype=float)
    flows = schedule.flows_on_grid(t0, t1, substep)
    n_sub = flows.shape[0]
    if mu2_factor_fn is None:
        mu2f = np.ones(n_sub)
    else:
        mids = t0 + (np.arange(n_sub) + 0.5) * substep
        mu2f = np.array([float(mu2_factor_fn(t)) for t in mids])

    kin = p.pack()
    theta_u = cfg.theta_u_matrix
    traj, clamped = kernels.rk4_interval(
        x0, flows, mu2f, substep, theta_u, p.k_hyd, kin, cfg.volume, clamp)
    if not np.all(np.isfinite(traj)):
        raise NonFiniteState(f"non-finite state while integrating [{t0}, {t1}]")

    times = t0 + np.arange(n_sub + 1) * substep
    outs = np.empty((n_sub + 1, 2))
    outs[0] = kernels.output_vec(traj[0], kin, cfg.m,
                                 mu2f[0] if n_sub else 1.0)
    for k in range(n_sub):
        outs[k + 1] = kernels.output_vec(traj[k + 1], kin, cfg.m, mu2f[k])
    return SimTrajectory(times=times, states=traj, outputs=outs,
                         inputs_applied=flows, clamped_mass=clamped)
