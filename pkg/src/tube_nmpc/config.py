"""Structured-config (TOML) loading: model parameter files and scenario
presets, plus the Scenario object consumed by the harness and the CLI.

The parameter file declares the reactor, the feedstock characterizations and
the kinetic constants (units as documented in tube_nmpc.model; s2-type
concentrations in mmol/L). The scenario file holds the diet plan, horizons,
controller block, uncertainty and knockdown blocks. Parsers reject missing or
negative entries rather than guessing defaults for physical quantities.
"""

import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .controllers import ConstraintSets, CostWeights, PiGains
from .errors import ConfigError
from .harness import (DietPlan, KnockdownConfig, ReferenceSet,
                      UncertaintyConfig)
from .model import FeedstockSpec, KineticParams, ReactorConfig

CONTROLLER_NAMES = ("classical", "offline-tube", "online-tube", "override-pi")
PRESET_NAMES = ("t0", "t1", "t1b", "t2", "t3", "t4", "t5", "t6")

_KINETIC_KEYS = ("mu_max1", "mu_max2", "ks1", "ks2", "ki2", "k1", "k2", "k3",
                 "k4", "k5", "k6", "kla", "kh_pc")


def _read_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}")


def _require(table: dict, key: str, where: str):
    if key not in table:
        raise ConfigError(f"missing key {key!r} in {where}")
    return table[key]


def load_model(tbl: dict):
    """(ReactorConfig, KineticParams) from a parsed parameter table."""
    reactor = _require(tbl, "reactor", "parameter file")
    volume = float(_require(reactor, "volume", "[reactor]"))
    if volume <= 0:
        raise ConfigError("reactor volume must be positive")
    feeds = _require(tbl, "feedstock", "parameter file")
    specs = []
    for f in feeds:
        theta = np.asarray(_require(f, "theta_u", "[[feedstock]]"), dtype=float)
        if np.any(theta < 0):
            raise ConfigError(f"feedstock {f.get('name')}: negative theta_u")
        specs.append(FeedstockSpec(name=_require(f, "name", "[[feedstock]]"),
                                   theta_u=theta,
                                   controllable=bool(f.get("controllable",
                                                           False))))
    cfg = ReactorConfig(volume=volume, feedstocks=specs)
    kin = _require(tbl, "kinetics", "parameter file")
    kw = {}
    for key in _KINETIC_KEYS:
        val = float(_require(kin, key, "[kinetics]"))
        if val <= 0:
            raise ConfigError(f"kinetics.{key} must be strictly positive")
        kw[key] = val
    k_hyd = np.asarray(_require(kin, "k_hyd", "[kinetics]"), dtype=float)
    if len(k_hyd) != cfg.m or np.any(k_hyd <= 0):
        raise ConfigError("kinetics.k_hyd needs one positive entry per feedstock")
    return cfg, KineticParams(k_hyd=k_hyd, **kw)


def preset_text(name: str) -> str:
    ref = resources.files("tube_nmpc").joinpath(f"presets/{name}.toml")
    if not ref.is_file():
        raise ConfigError(f"unknown preset {name!r}")
    return ref.read_text()


def load_params(path=None):
    """Parameter file from an explicit path, or the packaged default."""
    if path is None:
        ref = resources.files("tube_nmpc").joinpath("presets/params_default.toml")
        with resources.as_file(ref) as real:
            return load_model(_read_toml(real))
    return load_model(_read_toml(path))


@dataclass
class Scenario:
    """Everything one experiment needs: plant definition, diet, horizons,
    controller configuration and the uncertainty/knockdown protocol."""
    name: str
    cfg: ReactorConfig
    params: KineticParams
    diet: DietPlan
    feeding: str = "continuous"
    tc: float = 0.25
    hp: int = 10
    hc: int = 2
    substep: float = 0.025          # prediction-model substep
    plant_substep: float = 0.025    # plant substep (finer when impulsive)
    controller: str = "classical"
    wy: np.ndarray = field(default_factory=lambda: np.ones(2))
    wy_hp: float = 90.0
    wx: float = 1.0
    wu: float = 9.0
    slack_enabled: bool = False
    tight_bounds: bool = False
    uncertainty: UncertaintyConfig = field(default_factory=UncertaintyConfig)
    knockdown: KnockdownConfig = field(default_factory=KnockdownConfig)
    u_lb: float = 0.0
    u_ub: float = 0.6
    du_lb: float = -0.2
    du_ub: float = 0.2
    x_wide_ub: Optional[np.ndarray] = None
    s2_tight_ub: float = 20.0
    x2_tight_lb: float = 1.0
    pi_kp1: float = 0.02
    pi_ki1: float = 0.01
    pi_kp2: float = 2.0
    pi_ki2: float = 2.0
    pi_ratio_factor: float = 1.05   # setpoint = factor x steady ratio

    def __post_init__(self):
        self.wy = np.asarray(self.wy, dtype=float)
        if self.controller not in CONTROLLER_NAMES:
            raise ConfigError(
                f"unknown controller {self.controller!r}; "
                f"valid: {', '.join(CONTROLLER_NAMES)}")
        if self.feeding not in ("continuous", "impulsive"):
            raise ConfigError(f"unknown feeding mode {self.feeding!r}")
        if not self.hc < self.hp:
            raise ConfigError("hc must be smaller than hp")
        if self.x_wide_ub is None:
            m = self.cfg.m
            self.x_wide_ub = np.concatenate(
                [np.full(m, 50.0), [20.0, 20.0, 50.0, 400.0, 400.0, 400.0]])
        else:
            self.x_wide_ub = np.asarray(self.x_wide_ub, dtype=float)
        if self.knockdown.enabled and self.knockdown.center is None:
            start, end = self.diet.transition_window(0)
            self.knockdown.center = 0.5 * (start + end)

    # --- indices of the softly bounded states
    @property
    def _ix2(self) -> int:
        return self.cfg.m + 1

    @property
    def _is2(self) -> int:
        return self.cfg.m + 3

    def weights(self, ybar) -> CostWeights:
        return CostWeights(wy=self.wy, ybar=ybar, wy_hp=self.wy_hp,
                           wx=self.wx, wu=self.wu)

    def nominal_weights(self, ybar) -> CostWeights:
        return CostWeights(wy=self.wy, ybar=ybar)

    def _x_bounds(self, tight: bool):
        lb = np.zeros(self.cfg.n)
        ub = self.x_wide_ub.copy()
        if tight and not self.slack_enabled:
            lb[self._ix2] = self.x2_tight_lb
            ub[self._is2] = self.s2_tight_ub
        return lb, ub

    def _tight_slack_spec(self):
        return [(self._ix2, self.x2_tight_lb, np.inf),
                (self._is2, -np.inf, self.s2_tight_ub)]

    def _make_sets(self, tight: bool) -> ConstraintSets:
        lb, ub = self._x_bounds(tight)
        return ConstraintSets(x_lb=lb, x_ub=ub,
                              u_lb=[self.u_lb], u_ub=[self.u_ub],
                              du_lb=[self.du_lb], du_ub=[self.du_ub])

    def ancillary_sets(self) -> ConstraintSets:
        # classical carries the tightened set itself; the tube variants
        # tighten the nominal problem and keep the ancillary set wide
        tight = self.tight_bounds and self.controller == "classical"
        return self._make_sets(tight)

    def nominal_sets(self) -> ConstraintSets:
        return self._make_sets(self.tight_bounds)

    def slack_spec(self):
        """Soft tightened bounds on the classical problem (tube ancillary
        problems keep the wide set and need no slack)."""
        if (self.slack_enabled and self.tight_bounds
                and self.controller == "classical"):
            return self._tight_slack_spec()
        return None

    def nominal_slack_spec(self):
        if self.slack_enabled and self.tight_bounds:
            return self._tight_slack_spec()
        return None

    def pi_gains(self, refs: ReferenceSet) -> PiGains:
        ci = self.cfg.controllable_index
        ratio_ss = float(refs.y_ref[0, 1])
        return PiGains(kp1=self.pi_kp1, ki1=self.pi_ki1,
                       kp2=self.pi_kp2, ki2=self.pi_ki2,
                       u_ss=float(refs.u0[ci]),
                       ratio_setpoint=self.pi_ratio_factor * ratio_ss)

    @property
    def n_steps(self) -> int:
        return int(round(self.diet.total_days / self.tc))


def _scenario_from_table(tbl: dict, name: str, base_dir=None) -> Scenario:
    params_file = tbl.get("params_file")
    if params_file is None or params_file == "default":
        cfg, params = load_params()
    else:
        p = Path(params_file)
        if base_dir is not None and not p.is_absolute():
            p = Path(base_dir) / p
        cfg, params = load_params(p)

    diet_tbl = _require(tbl, "diet", name)
    phases = []
    for ph in _require(diet_tbl, "phases", "[diet]"):
        phases.append((float(_require(ph, "days", "[[diet.phases]]")),
                       np.asarray(_require(ph, "flows", "[[diet.phases]]"),
                                  dtype=float)))
    diet = DietPlan(phases=phases,
                    transition=float(diet_tbl.get("transition", 0.0)))

    hor = tbl.get("horizons", {})
    ctrl = tbl.get("controller", {})
    wtab = tbl.get("weights", {})
    utab = tbl.get("uncertainty", {})
    ktab = tbl.get("knockdown", {})
    btab = tbl.get("bounds", {})
    ptab = tbl.get("pi", {})

    ucfg = UncertaintyConfig(
        kinetic_rel_std=float(utab.get("kinetic_rel_std", 0.20)),
        noise_rel_std=np.asarray(utab.get("noise_rel_std", [0.05, 0.02]),
                                 dtype=float),
        n_runs=int(utab.get("n_runs", 10)),
        seed=int(utab.get("seed", 0)))
    kcfg = KnockdownConfig(
        enabled=bool(ktab.get("enabled", False)),
        amplitude_mean=float(ktab.get("amplitude_mean", 0.60)),
        duration_mean=float(ktab.get("duration_mean", 7.0)),
        amplitude_rel_std=float(ktab.get("amplitude_rel_std", 0.07)),
        duration_rel_std_days=float(ktab.get("duration_rel_std_days", 1.0)),
        ramp_edges=float(ktab.get("ramp_edges", 0.5)),
        center=(float(ktab["center"]) if "center" in ktab else None))

    feeding = tbl.get("feeding", "continuous")
    kwargs = dict(
        name=tbl.get("name", name),
        cfg=cfg, params=params, diet=diet, feeding=feeding,
        tc=float(hor.get("tc", 0.25)),
        hp=int(hor.get("hp", 10)),
        hc=int(hor.get("hc", 2)),
        substep=float(hor.get("substep", 0.025)),
        plant_substep=float(hor.get(
            "plant_substep", 1.0 / 240.0 if feeding == "impulsive" else 0.025)),
        controller=ctrl.get("mode", "classical"),
        slack_enabled=bool(ctrl.get("slack", False)),
        tight_bounds=bool(ctrl.get("tight_bounds", False)),
        wy=np.asarray(wtab.get("wy", [1.0, 1.0]), dtype=float),
        wy_hp=float(wtab.get("wy_hp", 90.0)),
        wx=float(wtab.get("wx", 1.0)),
        wu=float(wtab.get("wu", 9.0)),
        uncertainty=ucfg, knockdown=kcfg,
        u_lb=float(btab.get("u_lb", 0.0)),
        u_ub=float(btab.get("u_ub", 0.6)),
        du_lb=float(btab.get("du_lb", -0.2)),
        du_ub=float(btab.get("du_ub", 0.2)),
        s2_tight_ub=float(btab.get("s2_tight_ub", 20.0)),
        x2_tight_lb=float(btab.get("x2_tight_lb", 1.0)),
        pi_kp1=float(ptab.get("kp1", 0.02)),
        pi_ki1=float(ptab.get("ki1", 0.01)),
        pi_kp2=float(ptab.get("kp2", 2.0)),
        pi_ki2=float(ptab.get("ki2", 2.0)),
        pi_ratio_factor=float(ptab.get("ratio_factor", 1.05)))
    if "x_wide_ub" in btab:
        kwargs["x_wide_ub"] = np.asarray(btab["x_wide_ub"], dtype=float)
    return Scenario(**kwargs)


def load_scenario(path_or_name) -> Scenario:
    """A Scenario from a TOML file path or a packaged preset name (t0..t6)."""
    s = str(path_or_name)
    if s in PRESET_NAMES:
        ref = resources.files("tube_nmpc").joinpath(f"presets/{s}.toml")
        with resources.as_file(ref) as real:
            return _scenario_from_table(_read_toml(real), s)
    p = Path(s)
    return _scenario_from_table(_read_toml(p), p.stem, base_dir=p.parent)
