"""Reduced-order anaerobic co-digestion model (AM2-lineage, per-feedstock
hydrolysis extension).

State layout, fixed everywhere in the package::

    x = [xt_1 .. xt_m, x1, x2, s1, s2, c, z]      (n = m + 6)

with xt_i the biodegradable volatile solids of feedstock i (g/L), x1/x2 the
acidogen/methanogen biomasses (g/L), s1 the acidogenesis substrate (g_COD/L),
s2 the total VFA (mmol/L), c the dissolved inorganic carbon (mmol/L) and z the
total alkalinity (mmol/L). ks2/ki2 are stored in the same unit as s2 (mmol/L).

Reaction wiring: hydrolysis of xt_i feeds s1 (COD-conserving, yield 1);
acidogen growth consumes s1 (k1), produces s2 (k2) and CO2 (k4); methanogen
growth consumes s2 (k3), produces gaseous CH4 (k6, not a state) and CO2 (k5);
alkalinity is transport-only. The CO2 off-gas channel is reduced to
q_C = kla * max(0, c - kh_pc); the CO2/CH4 ratio is only used qualitatively,
and the exact gas-phase speciation is out of scope.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import AllFlowsZero

Q_EPS = kernels.Q_EPS
RATIO_CAP = kernels.RATIO_CAP

# offsets of the non-feedstock states relative to m
OFF_X1, OFF_X2, OFF_S1, OFF_S2, OFF_C, OFF_Z = range(6)


@dataclass
class FeedstockSpec:
    """Inlet characterization of one co-feedstock.

    theta_u holds the inlet concentration of every state variable (length
    m + 6, same layout and units as the state vector).
    """

    name: str
    theta_u: np.ndarray
    controllable: bool = False

    def __post_init__(self):
        self.theta_u = np.asarray(self.theta_u, dtype=float)
        if np.any(self.theta_u < 0):
            raise ValueError(f"feedstock {self.name}: theta_u has negative entries")


@dataclass
class KineticParams:
    mu_max1: float  # 1/d
    mu_max2: float  # 1/d
    ks1: float      # g_COD/L
    ks2: float      # mmol/L (same unit as s2)
    ki2: float      # mmol/L
    k_hyd: np.ndarray  # 1/d, length m
    k1: float       # g_COD consumed per g acidogens grown
    k2: float       # mmol VFA produced per g acidogens grown
    k3: float       # mmol VFA consumed per g methanogens grown
    k4: float       # mmol CO2 per g acidogens grown
    k5: float       # mmol CO2 per g methanogens grown
    k6: float       # mmol CH4 per g methanogens grown
    kla: float      # 1/d
    kh_pc: float    # mmol/L, lumped Henry-equilibrium product for CO2

    def __post_init__(self):
        self.k_hyd = np.asarray(self.k_hyd, dtype=float)
        scalars = [self.mu_max1, self.mu_max2, self.ks1, self.ks2, self.ki2,
                   self.k1, self.k2, self.k3, self.k4, self.k5, self.k6,
                   self.kla, self.kh_pc]
        if any(s <= 0 for s in scalars) or np.any(self.k_hyd <= 0):
            raise ValueError("all kinetic parameters must be strictly positive")

    @property
    def theta_kin(self) -> np.ndarray:
        """The Haldane kinetic-uncertainty subset, addressable as a unit."""
        return np.array([self.mu_max1, self.mu_max2, self.ks1, self.ks2, self.ki2])

    def with_theta_kin(self, theta: np.ndarray) -> "KineticParams":
        return KineticParams(
            mu_max1=float(theta[0]), mu_max2=float(theta[1]), ks1=float(theta[2]),
            ks2=float(theta[3]), ki2=float(theta[4]), k_hyd=self.k_hyd.copy(),
            k1=self.k1, k2=self.k2, k3=self.k3, k4=self.k4, k5=self.k5,
            k6=self.k6, kla=self.kla, kh_pc=self.kh_pc)

    def pack(self) -> np.ndarray:
        """Kernel packing; order fixed by kernels.KIN_*."""
        return np.array([self.mu_max1, self.mu_max2, self.ks1, self.ks2,
                         self.ki2, self.k1, self.k2, self.k3, self.k4,
                         self.k5, self.k6, self.kla, self.kh_pc])


@dataclass
class ReactorConfig:
    volume: float  # L
    feedstocks: list = field(default_factory=list)

    def __post_init__(self):
        if self.volume <= 0:
            raise ValueError("reactor volume must be positive")
        if len(self.feedstocks) < 1:
            raise ValueError("at least one feedstock is required")
        n_ctrl = sum(1 for f in self.feedstocks if f.controllable)
        if n_ctrl != 1:
            raise ValueError(f"exactly one controllable feedstock expected, got {n_ctrl}")
        for f in self.feedstocks:
            if f.theta_u.shape != (self.n,):
                raise ValueError(
                    f"feedstock {f.name}: theta_u length {f.theta_u.shape[0]} != n={self.n}")

    @property
    def m(self) -> int:
        return len(self.feedstocks)

    @property
    def n(self) -> int:
        return self.m + 6

    @property
    def controllable_index(self) -> int:
        return next(i for i, f in enumerate(self.feedstocks) if f.controllable)

    @property
    def theta_u_matrix(self) -> np.ndarray:
        """(m, n) inlet-concentration matrix."""
        return np.stack([f.theta_u for f in self.feedstocks])


@dataclass
class StateVector:
    """Named view of the digester state; to_array() gives the packed layout."""

    xt: np.ndarray  # g/L, length m
    x1: float       # g/L
    x2: float       # g/L
    s1: float       # g_COD/L
    s2: float       # mmol/L
    c: float        # mmol/L
    z: float        # mmol/L

    def __post_init__(self):
        self.xt = np.atleast_1d(np.asarray(self.xt, dtype=float))
        if np.any(self.to_array() < 0):
            raise ValueError("state components must be nonnegative")

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.xt, [self.x1, self.x2, self.s1,
                                         self.s2, self.c, self.z]])

    @classmethod
    def from_array(cls, x) -> "StateVector":
        x = np.asarray(x, dtype=float)
        m = x.shape[0] - 6
        return cls(xt=x[:m], x1=x[m], x2=x[m + 1], s1=x[m + 2],
                   s2=x[m + 3], c=x[m + 4], z=x[m + 5])

    def __array__(self, dtype=None):
        a = self.to_array()
        return a if dtype is None else a.astype(dtype)


@dataclass
class OutputVector:
    qm: float     # mmol/L/d
    ratio: float  # CO2/CH4, dimensionless

    def __post_init__(self):
        if self.qm < 0 or self.ratio < 0:
            raise ValueError("outputs must be nonnegative")

    def to_array(self) -> np.ndarray:
        return np.array([self.qm, self.ratio])


def inlet_mix(flows, specs) -> np.ndarray:
    """Flow-weighted average of the feedstock inlet concentrations."""
    flows = np.asarray(flows, dtype=float)
    if len(flows) != len(specs):
        raise ValueError("one flow per feedstock expected")
    if np.any(flows < 0):
        raise ValueError("flows must be nonnegative")
    total = flows.sum()
    if total <= 0.0:
        raise AllFlowsZero("x_in undefined with zero total flow (treat D = 0)")
    theta = np.stack([f.theta_u for f in specs])
    return flows @ theta / total


def dilution_rate(flows, volume: float) -> float:
    flows = np.asarray(flows, dtype=float)
    if volume <= 0:
        raise ValueError("volume must be positive")
    if np.any(flows < 0):
        raise ValueError("flows must be nonnegative")
    return float(flows.sum() / volume)


def mu1(s1: float, p: KineticParams) -> float:
    """Monod growth rate of the acidogens."""
    if s1 < 0:
        raise ValueError("s1 must be nonnegative")
    return p.mu_max1 * s1 / (s1 + p.ks1)


def mu2(s2: float, p: KineticParams, factor: float = 1.0) -> float:
    """Haldane growth rate of the methanogens; unimodal with an interior
    maximum at sqrt(ks2*ki2). `factor` scales mu_max2 (knockdown experiments).
    """
    if s2 < 0:
        raise ValueError("s2 must be nonnegative")
    return factor * p.mu_max2 * s2 / (s2 + p.ks2 + s2 * s2 / p.ki2)


def reaction_rates(x, p: KineticParams, mu2_factor: float = 1.0) -> np.ndarray:
    """[k_hyd_i * xt_i (i=1..m), mu1*x1, mu2*x2]."""
    x = np.asarray(x, dtype=float)
    m = p.k_hyd.shape[0]
    rates = np.empty(m + 2)
    rates[:m] = p.k_hyd * x[:m]
    rates[m] = mu1(max(x[m + OFF_S1], 0.0), p) * x[m + OFF_X1]
    rates[m + 1] = mu2(max(x[m + OFF_S2], 0.0), p, mu2_factor) * x[m + OFF_X2]
    return rates


def rhs(x, flows, cfg: ReactorConfig, p: KineticParams,
        mu2_factor: float = 1.0) -> np.ndarray:
    """d/dt of the state: D (x_in - x) + stoichiometric wiring of the rates."""
    x = np.asarray(x, dtype=float)
    flows = np.asarray(flows, dtype=float)
    return kernels._rhs(x, flows, cfg.theta_u_matrix, p.k_hyd, p.pack(),
                        cfg.volume, mu2_factor)


def outputs(x, flows, cfg: ReactorConfig, p: KineticParams,
            mu2_factor: float = 1.0) -> OutputVector:
    """Measured outputs: bio-methane rate q_M = k6*mu2*x2 and the CO2/CH4
    ratio q_C/q_M, clamped to RATIO_CAP when q_M < Q_EPS."""
    x = np.asarray(x, dtype=float)
    y = kernels.output_vec(x, p.pack(), cfg.m, mu2_factor)
    return OutputVector(qm=float(y[0]), ratio=float(y[1]))
