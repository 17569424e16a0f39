"""Direct multiple-shooting transcription and a constrained NLP solver.

The transcribed program has the fixed structure

    min  f(v)   s.t.  c(v) = 0,   lb <= v <= ub,   rlb <= A v <= rub

with smooth f, shooting-continuity equalities c, box bounds and a small block
of linear range constraints (control-move bounds, slack softening rows). The
solver is a safeguarded augmented-Lagrangian method: range rows are folded
into equalities with bounded auxiliary variables, each bound-constrained
subproblem is minimized by a projected-Newton iteration (dense Cholesky on the
free variables, Armijo backtracking), and multipliers are updated
LANCELOT-style. All gradients are exact (forward RK4 sensitivities assembled
by the dynamics stepper), never finite differences; the Newton matrix uses a
Gauss-Newton approximation of the cost curvature when the problem provides
one, so the penalty term rho JᵀJ carries the dominant curvature exactly.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InconsistentBounds, NonFiniteState


# ---------------------------------------------------------------------------
# problem containers


@dataclass
class LinearRanges:
    """rlb <= A v <= rub."""
    a: np.ndarray
    lb: np.ndarray
    ub: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.a.shape[0]


@dataclass
class NlpProblem:
    n_vars: int
    cost: Callable  # v -> (float, grad)
    eq_constraints: Callable  # v -> (residual, jacobian); residual may be empty
    var_bounds: tuple  # (lb, ub) arrays, +-inf allowed
    var_layout: dict  # name -> slice, partitioning [0, n_vars)
    var_scale: Optional[np.ndarray] = None
    lin_ineq: Optional[LinearRanges] = None
    cost_hess: Optional[Callable] = None  # v -> PSD (n_vars, n_vars) approx
    value_only: Optional[Callable] = None  # v -> (f, residual), no derivatives

    def __post_init__(self):
        lb, ub = self.var_bounds
        if np.any(np.asarray(lb) > np.asarray(ub)):
            raise InconsistentBounds("variable lower bound exceeds upper bound")
        if self.var_scale is None:
            self.var_scale = np.ones(self.n_vars)


@dataclass
class NlpSolution:
    v_star: np.ndarray
    cost_star: float
    kkt_residual: float
    iterations: int
    status: str  # converged | max_iter | infeasible | non_finite
    lam_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lam_ineq: np.ndarray = field(default_factory=lambda: np.zeros(0))


# ---------------------------------------------------------------------------
# solver


def _projected_stationarity(v, grad, lb, ub):
    return float(np.max(np.abs(v - np.clip(v - grad, lb, ub))) if len(v) else 0.0)


def kkt_residual(p: NlpProblem, v, multipliers) -> float:
    """Max-norm KKT measure of {min f s.t. c=0, ranges, boxes} at (v, lam).

    multipliers: dict with 'eq' and optionally 'ineq' arrays. Stationarity is
    the projected-gradient residual (bound complementarity folded in); range
    complementarity is |lam_j| * distance-to-the-nearest-active-bound.
    """
    v = np.asarray(v, dtype=float)
    lam_eq = np.asarray(multipliers.get("eq", np.zeros(0)), dtype=float)
    lam_in = np.asarray(multipliers.get("ineq", np.zeros(0)), dtype=float)
    f, g = p.cost(v)
    res, jac = p.eq_constraints(v)
    grad_l = g.copy()
    feas = 0.0
    comp = 0.0
    if len(res):
        grad_l += jac.T @ lam_eq
        feas = float(np.max(np.abs(res)))
    if p.lin_ineq is not None and p.lin_ineq.n_rows:
        av = p.lin_ineq.a @ v
        grad_l += p.lin_ineq.a.T @ lam_in
        viol = np.maximum(p.lin_ineq.lb - av, 0) + np.maximum(av - p.lin_ineq.ub, 0)
        feas = max(feas, float(np.max(viol)))
        gap = np.minimum(np.abs(av - p.lin_ineq.lb), np.abs(p.lin_ineq.ub - av))
        comp = float(np.max(np.abs(lam_in) * np.minimum(gap, 1.0))) if len(lam_in) else 0.0
    lb, ub = p.var_bounds
    stat = _projected_stationarity(v, grad_l, lb, ub)
    return max(stat, feas, comp)


class _Workspace:
    """Scaled augmented-Lagrangian workspace with range rows folded into
    equalities via bounded auxiliary variables."""

    def __init__(self, p: NlpProblem):
        self.p = p
        n = p.n_vars
        s = np.asarray(p.var_scale, dtype=float)
        self.s = s
        lb, ub = (np.asarray(b, dtype=float) for b in p.var_bounds)
        if p.lin_ineq is not None and p.lin_ineq.n_rows:
            self.a = p.lin_ineq.a
            row_scale = np.abs(self.a) @ s
            self.r = np.maximum(row_scale, 1e-12)
            self.n_in = self.a.shape[0]
            t_lb = p.lin_ineq.lb / self.r
            t_ub = p.lin_ineq.ub / self.r
        else:
            self.a = None
            self.n_in = 0
            t_lb = t_ub = np.zeros(0)
        self.n = n
        self.zlb = np.concatenate([lb / s, t_lb])
        self.zub = np.concatenate([ub / s, t_ub])
        self._cache_key = None
        self._cache = None
        self.n_eval = 0
        self.lm = 1e-8

    def split(self, z):
        return z[: self.n] * self.s, z[self.n:]

    def pack(self, v, av=None):
        zv = v / self.s
        if self.n_in:
            if av is None:
                av = self.a @ v
            t0 = np.clip(av / self.r, self.zlb[self.n:], self.zub[self.n:])
            return np.concatenate([zv, t0])
        return zv

    def eval_point(self, z):
        """(f, gf_z, c_all, jac applied lazily); returns None on non-finite."""
        key = z.tobytes()
        if key == self._cache_key:
            return self._cache
        v, t = self.split(z)
        self.n_eval += 1
        try:
            f, g = self.p.cost(v)
            res, jac = self.p.eq_constraints(v)
        except NonFiniteState:
            self._cache_key, self._cache = key, None
            return None
        if not (np.isfinite(f) and np.all(np.isfinite(g))
                and np.all(np.isfinite(res))):
            self._cache_key, self._cache = key, None
            return None
        parts_c = [res]
        if self.n_in:
            av = self.a @ v
            parts_c.append(av / self.r - t)
        c_all = np.concatenate(parts_c) if parts_c else np.zeros(0)
        self._cache_key = key
        self._cache = (f, g, res, jac, c_all)
        return self._cache

    def al_val(self, z, lam, rho):
        """Augmented-Lagrangian value only; uses the problem's cheap
        derivative-free evaluation when available (line-search trials)."""
        if self.p.value_only is None:
            return self.al_fun(z, lam, rho)[0]
        v, t = self.split(z)
        try:
            f, res = self.p.value_only(v)
        except NonFiniteState:
            return None
        if not (np.isfinite(f) and np.all(np.isfinite(res))):
            return None
        if self.n_in:
            c_all = np.concatenate([res, (self.a @ v) / self.r - t])
        else:
            c_all = res
        return f + lam @ c_all + 0.5 * rho * (c_all @ c_all)

    def al_fun(self, z, lam, rho):
        data = self.eval_point(z)
        if data is None:
            return None, None
        f, g, res, jac, c_all = data
        w = lam + rho * c_all
        val = f + lam @ c_all + 0.5 * rho * (c_all @ c_all)
        gv = g.copy()
        n_eq = len(res)
        if n_eq:
            gv += jac.T @ w[:n_eq]
        gz = np.empty(len(z))
        gz[: self.n] = gv * self.s
        if self.n_in:
            w_in = w[n_eq:]
            gz[: self.n] += (self.a.T @ (w_in / self.r)) * self.s
            gz[self.n:] = -w_in
        return val, gz

    def constraint_jac_z(self, jac):
        """Full constraint Jacobian w.r.t. the scaled variables [v/s; t]."""
        nz = self.n + self.n_in
        n_eq = jac.shape[0]
        c = np.zeros((n_eq + self.n_in, nz))
        c[:n_eq, : self.n] = jac * self.s[None, :]
        if self.n_in:
            c[n_eq:, : self.n] = (self.a * self.s[None, :]) / self.r[:, None]
            c[n_eq:, self.n:] = -np.eye(self.n_in)
        return c

    def al_hess(self, z, rho, jac):
        """Gauss-Newton Hessian of the augmented Lagrangian in scaled space:
        S Hf S (or identity when the problem gives no cost curvature) plus
        rho CᵀC from the penalty term."""
        nz = self.n + self.n_in
        h = np.zeros((nz, nz))
        if self.p.cost_hess is not None:
            v = z[: self.n] * self.s
            hf = self.p.cost_hess(v)
            h[: self.n, : self.n] = hf * np.outer(self.s, self.s)
            if self.n_in:
                h[self.n:, self.n:] = np.eye(self.n_in) * 1e-8
        else:
            np.fill_diagonal(h, 1.0)
        c = self.constraint_jac_z(jac)
        if c.shape[0]:
            h += rho * (c.T @ c)
        return h

    def inner_newton(self, z, lam, rho, gtol, max_it):
        """Projected-Newton descent on the augmented Lagrangian over the box.

        A Levenberg damping term adapts to the gap between the Gauss-Newton
        model and the true curvature: full steps shrink it, backtracked steps
        grow it, so most iterations cost a single evaluation.
        Returns (z, iterations, ok). ok=False flags a non-finite evaluation
        at the incoming point (line-search failures just stop early)."""
        val, g = self.al_fun(z, lam, rho)
        if val is None:
            return z, 0, False
        eps = 1e-10
        lbf = np.where(np.isfinite(self.zlb), self.zlb, 0.0)
        ubf = np.where(np.isfinite(self.zub), self.zub, 0.0)
        lo_thr = np.where(np.isfinite(self.zlb),
                          lbf + eps * (1 + np.abs(lbf)), -np.inf)
        up_thr = np.where(np.isfinite(self.zub),
                          ubf - eps * (1 + np.abs(ubf)), np.inf)
        for it in range(max_it):
            pg = z - np.clip(z - g, self.zlb, self.zub)
            if np.max(np.abs(pg)) <= gtol:
                return z, it, True
            data = self.eval_point(z)
            h = self.al_hess(z, rho, data[3])
            low_active = (z <= lo_thr) & (g > 0)
            up_active = (z >= up_thr) & (g < 0)
            free = ~(low_active | up_active)
            d = -g.copy()
            idx = np.where(free)[0]
            if len(idx):
                hff = h[np.ix_(idx, idx)]
                gf = g[idx]
                mu = self.lm * (1.0 + np.trace(hff) / len(idx))
                for _ in range(12):
                    try:
                        l_chol = np.linalg.cholesky(
                            hff + mu * np.eye(len(idx)))
                        df = -np.linalg.solve(
                            l_chol.T, np.linalg.solve(l_chol, gf))
                        break
                    except np.linalg.LinAlgError:
                        mu *= 100.0
                else:
                    df = -gf
                d[idx] = df
            # projected Armijo backtracking
            accepted = False
            alpha = 1.0
            for _ in range(40):
                z_try = np.clip(z + alpha * d, self.zlb, self.zub)
                pred = g @ (z_try - z)
                if pred >= 0:
                    alpha *= 0.5
                    continue
                val_try = self.al_val(z_try, lam, rho)
                if val_try is not None and val_try <= val + 1e-4 * pred:
                    # derivatives only at the accepted point
                    val_full, g_try = self.al_fun(z_try, lam, rho)
                    if val_full is None:
                        alpha *= 0.5
                        continue
                    step = z_try - z
                    model = pred + 0.5 * step @ (h @ step)
                    ratio = (val_full - val) / model if model < 0 else 0.0
                    if ratio > 0.75 and alpha == 1.0:
                        self.lm = max(self.lm / 3.0, 1e-10)
                    elif ratio < 0.25:
                        self.lm = min(self.lm * 4.0, 1e4)
                    z, val, g = z_try, val_full, g_try
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                # try a plain projected-gradient step before giving up
                alpha = 1.0
                for _ in range(40):
                    z_try = np.clip(z - alpha * g, self.zlb, self.zub)
                    val_try = self.al_val(z_try, lam, rho)
                    if (val_try is not None and z_try is not z
                            and val_try < val):
                        val_full, g_try = self.al_fun(z_try, lam, rho)
                        if val_full is None:
                            alpha *= 0.25
                            continue
                        z, val, g = z_try, val_full, g_try
                        accepted = True
                        break
                    alpha *= 0.25
            if not accepted:
                return z, it + 1, True
        return z, max_it, True


def solve(p: NlpProblem, warm_start=None, tol: float = 1e-6,
          max_iter: int = 200, warm_multipliers=None,
          log_file=None) -> NlpSolution:
    """Solve the NLP to a first-order KKT point.

    max_iter caps the cumulative inner (projected-Newton) iteration count. The
    result is deterministic for identical inputs. status='converged'
    guarantees kkt_residual <= tol with variable bounds satisfied to tol.
    warm_multipliers, when given, seeds the constraint multipliers (ordered
    [equalities; range rows]); receding-horizon callers pass the previous
    solution's multipliers to cut the outer loop short.
    """
    ws = _Workspace(p)
    lb, ub = (np.asarray(b, dtype=float) for b in p.var_bounds)
    if warm_start is not None:
        v0 = np.clip(np.asarray(warm_start, dtype=float), lb, ub)
        if v0.shape != (p.n_vars,):
            raise ValueError("warm_start length mismatch")
    else:
        v0 = np.clip(np.zeros(p.n_vars), lb, ub)
    z = ws.pack(v0)
    n_c = 0
    probe = ws.eval_point(z)
    if probe is not None:
        n_c = len(probe[4])
    lam = np.zeros(n_c)
    if warm_multipliers is not None and len(warm_multipliers) == n_c:
        lam = np.asarray(warm_multipliers, dtype=float).copy()
        n_eq0 = n_c - ws.n_in
        if ws.n_in:
            lam[n_eq0:] *= ws.r
    # seeded multipliers mean a neighbouring problem was already solved, so
    # skip the gentle first penalty ramp
    rho = 250.0 if warm_multipliers is not None and n_c else 10.0
    omega = 1e-2  # inner stationarity target
    eta = 1e-2    # feasibility target
    total_iters = 0
    status = "max_iter"
    kkt = np.inf
    best_feas = np.inf
    stall = 0

    for outer in range(400):
        inner_cap = max(5, min(50, max_iter - total_iters))
        z_prev = z
        z, nit, ok = ws.inner_newton(z, lam, rho, 0.5 * omega, inner_cap)
        step_norm = float(np.linalg.norm(z - z_prev))
        total_iters += max(nit, 1)
        data = ws.eval_point(z)
        if not ok or data is None:
            status = "non_finite"
            break
        f, g, res_eq, jac, c_all = data
        feas = float(np.max(np.abs(c_all))) if n_c else 0.0
        cand = lam + rho * c_all
        # KKT measure at the candidate multipliers, in scaled space
        n_eq = len(res_eq)
        gv = g * ws.s
        if n_eq:
            gv += (jac.T @ cand[:n_eq]) * ws.s
        if ws.n_in:
            gv += (ws.a.T @ (cand[n_eq:] / ws.r)) * ws.s
        stat = _projected_stationarity(z[: ws.n], gv, ws.zlb[: ws.n], ws.zub[: ws.n])
        if ws.n_in:
            # auxiliary variables must also be stationary
            stat = max(stat, _projected_stationarity(
                z[ws.n:], -cand[n_eq:], ws.zlb[ws.n:], ws.zub[ws.n:]))
        kkt = max(stat, feas)
        if log_file is not None:
            log_file.write(f"{outer},{f:.12g},{kkt:.6g},{step_norm:.6g}\n")
        if kkt <= tol:
            lam = cand
            status = "converged"
            break
        if total_iters >= max_iter:
            status = "max_iter"
            lam = cand
            break
        if feas <= max(eta, tol):
            lam = cand
            eta = max(0.2 * eta, 0.1 * tol)
            omega = max(0.2 * omega, 0.05 * tol)
            stall = 0
        else:
            if feas > 0.9 * best_feas:
                stall += 1
            rho = min(rho * 5.0, 1e12)
            omega = max(0.5 * omega, 0.05 * tol)
            if rho >= 1e12 and stall >= 5:
                status = "infeasible"
                break
        best_feas = min(best_feas, feas)

    v_final, _ = ws.split(z)
    data = ws.eval_point(z)
    if data is None:
        return NlpSolution(v_star=v_final, cost_star=np.nan, kkt_residual=np.inf,
                           iterations=total_iters, status="non_finite")
    f = data[0]
    n_eq = len(data[2])
    return NlpSolution(v_star=v_final, cost_star=float(f), kkt_residual=float(kkt),
                       iterations=total_iters, status=status,
                       lam_eq=lam[:n_eq].copy(),
                       lam_ineq=(lam[n_eq:] / ws.r if ws.n_in else np.zeros(0)))


# ---------------------------------------------------------------------------
# multiple-shooting transcription


@dataclass
class SlackConfig:
    """Soft state bounds: per listed state, per shooting node, one slack
    variable eps >= 0 relaxes soft_lb <= x <= soft_ub; eps is penalized
    (quadratic + linear, on eps normalized by the state scale)."""
    indices: list
    soft_lb: np.ndarray
    soft_ub: np.ndarray
    weight: float = 1e4

    def __post_init__(self):
        self.soft_lb = np.asarray(self.soft_lb, dtype=float)
        self.soft_ub = np.asarray(self.soft_ub, dtype=float)


@dataclass
class OcpSpec:
    """Receding-horizon optimal-control problem over Hp intervals of length
    `interval`, with Hc free control moves held constant afterwards."""
    horizon: int            # Hp
    control_horizon: int    # Hc
    interval: float         # Tc, d
    dynamics: object        # stepper: .n, .mc, .step(k, x, u) -> (x_next, Sx, Su)
    x0: np.ndarray
    cost: object            # .evaluate(xs, us, z0) -> (J, gx, gu, gz0)
    state_bounds: tuple     # (lb, ub) arrays (n,), applied at nodes 1..Hp
    input_bounds: tuple     # (lb, ub) arrays (mc,)
    delta_input_bounds: Optional[tuple] = None  # (lb, ub) arrays (mc,)
    u_prev: Optional[np.ndarray] = None         # last applied move
    slack_config: Optional[SlackConfig] = None
    extra_initial_state_dof: bool = False       # adds z0* (online tube)
    initial_state_bounds: Optional[tuple] = None  # bounds on z0*
    x_scale: Optional[np.ndarray] = None
    u_scale: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.control_horizon < self.horizon:
            raise ValueError("Hc < Hp required")
        self.x0 = np.asarray(self.x0, dtype=float)
        n, mc = self.dynamics.n, self.dynamics.mc
        if self.x_scale is None:
            self.x_scale = np.ones(n)
        if self.u_scale is None:
            self.u_scale = np.ones(mc)


def transcribe(ocp: OcpSpec) -> NlpProblem:
    """Build the multiple-shooting NLP: v = [Hc control moves; states at
    shooting nodes 1..Hp; slacks; z0*], with shooting continuity equalities
    x_{k+1} = Phi(x_k, u_k) and move bounds as linear range rows."""
    hp, hc = ocp.horizon, ocp.control_horizon
    n, mc = ocp.dynamics.n, ocp.dynamics.mc
    n_sl = len(ocp.slack_config.indices) if ocp.slack_config else 0

    off = 0
    layout = {}
    layout["controls"] = slice(off, off + hc * mc)
    off += hc * mc
    layout["states"] = slice(off, off + hp * n)
    off += hp * n
    if n_sl:
        layout["slacks"] = slice(off, off + hp * n_sl)
        off += hp * n_sl
    if ocp.extra_initial_state_dof:
        layout["z0"] = slice(off, off + n)
        off += n
    nv = off

    xlb, xub = (np.asarray(b, dtype=float) for b in ocp.state_bounds)
    ulb, uub = (np.asarray(b, dtype=float) for b in ocp.input_bounds)
    lb = np.empty(nv)
    ub = np.empty(nv)
    lb[layout["controls"]] = np.tile(ulb, hc)
    ub[layout["controls"]] = np.tile(uub, hc)
    if ocp.delta_input_bounds is not None and ocp.u_prev is not None:
        dlb, dub = (np.asarray(b, dtype=float) for b in ocp.delta_input_bounds)
        # first move: the delta bound is a plain box around u_prev
        lb[: mc] = np.maximum(ulb, ocp.u_prev + dlb)
        ub[: mc] = np.minimum(uub, ocp.u_prev + dub)
    lb[layout["states"]] = np.tile(xlb, hp)
    ub[layout["states"]] = np.tile(xub, hp)
    if n_sl:
        lb[layout["slacks"]] = 0.0
        ub[layout["slacks"]] = np.inf
    if ocp.extra_initial_state_dof:
        zlb, zub = (ocp.initial_state_bounds if ocp.initial_state_bounds
                    else ocp.state_bounds)
        lb[layout["z0"]] = np.asarray(zlb, dtype=float)
        ub[layout["z0"]] = np.asarray(zub, dtype=float)
    if np.any(lb > ub):
        raise InconsistentBounds("transcribed bounds are inconsistent")

    scale = np.ones(nv)
    scale[layout["controls"]] = np.tile(ocp.u_scale, hc)
    scale[layout["states"]] = np.tile(ocp.x_scale, hp)
    if n_sl:
        scale[layout["slacks"]] = np.tile(ocp.x_scale[ocp.slack_config.indices], hp)
    if ocp.extra_initial_state_dof:
        scale[layout["z0"]] = ocp.x_scale

    # linear range rows: control moves after the first, slack softening
    rows = []
    rlo = []
    rhi = []
    if ocp.delta_input_bounds is not None and hc > 1:
        dlb, dub = (np.asarray(b, dtype=float) for b in ocp.delta_input_bounds)
        for j in range(1, hc):
            for i in range(mc):
                row = np.zeros(nv)
                row[j * mc + i] = 1.0
                row[(j - 1) * mc + i] = -1.0
                rows.append(row)
                rlo.append(dlb[i])
                rhi.append(dub[i])
    if n_sl:
        sl0 = layout["slacks"].start
        st0 = layout["states"].start
        sc = ocp.slack_config
        for k in range(hp):
            for j, idx in enumerate(sc.indices):
                i_x = st0 + k * n + idx
                i_e = sl0 + k * n_sl + j
                if np.isfinite(sc.soft_lb[j]):
                    row = np.zeros(nv)
                    row[i_x] = 1.0
                    row[i_e] = 1.0
                    rows.append(row)
                    rlo.append(sc.soft_lb[j])
                    rhi.append(np.inf)
                if np.isfinite(sc.soft_ub[j]):
                    row = np.zeros(nv)
                    row[i_x] = 1.0
                    row[i_e] = -1.0
                    rows.append(row)
                    rlo.append(-np.inf)
                    rhi.append(sc.soft_ub[j])
    lin = (LinearRanges(np.array(rows), np.array(rlo), np.array(rhi))
           if rows else None)

    n_eq = hp * n
    inv_xs = 1.0 / ocp.x_scale
    diag_inv_xs = np.diag(inv_xs)
    batched = hasattr(ocp.dynamics, "horizon_step")
    cache = {"key": None, "val": None}

    def compute(v):
        key = v.tobytes()
        if key == cache["key"]:
            return cache["val"]
        u_moves = v[layout["controls"]].reshape(hc, mc)
        xnodes = v[layout["states"]].reshape(hp, n)
        slacks = (v[layout["slacks"]].reshape(hp, n_sl) if n_sl else None)
        z0 = v[layout["z0"]] if ocp.extra_initial_state_dof else None
        xs = np.vstack([ocp.x0[None, :], xnodes])
        us = np.empty((hp, mc))
        for k in range(hp):
            us[k] = u_moves[min(k, hc - 1)]

        res = np.empty(n_eq)
        jac = np.zeros((n_eq, nv))
        st0 = layout["states"].start
        if batched:
            x_next_all, sx_all, su_all = ocp.dynamics.horizon_step(
                xs[:-1], us)
        else:
            x_next_all = np.empty((hp, n))
            sx_all = np.empty((hp, n, n))
            su_all = np.empty((hp, n, mc))
            for k in range(hp):
                x_next_all[k], sx_all[k], su_all[k] = ocp.dynamics.step(
                    k, xs[k], us[k])
        for k in range(hp):
            r0 = k * n
            res[r0:r0 + n] = (xnodes[k] - x_next_all[k]) * inv_xs
            jac[r0:r0 + n, st0 + k * n: st0 + (k + 1) * n] = diag_inv_xs
            if k > 0:
                jac[r0:r0 + n, st0 + (k - 1) * n: st0 + k * n] = \
                    -sx_all[k] * inv_xs[:, None]
            ju = -su_all[k] * inv_xs[:, None]
            cj = min(k, hc - 1) * mc
            jac[r0:r0 + n, cj:cj + mc] += ju

        j_cost, gx, gu, gz0 = ocp.cost.evaluate(xs, us, z0)
        grad = np.zeros(nv)
        grad[layout["states"]] = gx[1:].ravel()
        gmoves = np.zeros((hc, mc))
        for k in range(hp):
            gmoves[min(k, hc - 1)] += gu[k]
        grad[layout["controls"]] = gmoves.ravel()
        if ocp.extra_initial_state_dof and gz0 is not None:
            grad[layout["z0"]] = gz0
        if n_sl:
            w = ocp.slack_config.weight
            sn = slacks / ocp.x_scale[ocp.slack_config.indices]
            j_cost += w * float(np.sum(sn + sn * sn))
            grad[layout["slacks"]] = (
                w * (1.0 + 2.0 * sn) / ocp.x_scale[ocp.slack_config.indices]
            ).ravel()
        out = (float(j_cost), grad, res, jac)
        cache["key"], cache["val"] = key, out
        return out

    value_fn = None
    if hasattr(ocp.dynamics, "horizon_step_nosens") and hasattr(ocp.cost,
                                                                "value"):
        def value_fn(v):
            """Cost and shooting residual without derivatives; the cheap lane
            for line-search trial points."""
            u_moves = v[layout["controls"]].reshape(hc, mc)
            xnodes = v[layout["states"]].reshape(hp, n)
            z0 = v[layout["z0"]] if ocp.extra_initial_state_dof else None
            xs = np.vstack([ocp.x0[None, :], xnodes])
            us = u_moves[np.minimum(np.arange(hp), hc - 1)]
            x_next_all = ocp.dynamics.horizon_step_nosens(xs[:-1], us)
            res = ((xnodes - x_next_all) * inv_xs[None, :]).ravel()
            j = ocp.cost.value(xs, us, z0)
            if n_sl:
                w = ocp.slack_config.weight
                sn = (v[layout["slacks"]].reshape(hp, n_sl)
                      / ocp.x_scale[ocp.slack_config.indices])
                j += w * float(np.sum(sn + sn * sn))
            return float(j), res

    def cost_fn(v):
        f, g, _, _ = compute(v)
        return f, g

    def eq_fn(v):
        _, _, res, jac = compute(v)
        return res, jac

    hess_fn = None
    if hasattr(ocp.cost, "hess"):
        def hess_fn(v):
            """Block-diagonal Gauss-Newton curvature of the cost."""
            u_moves = v[layout["controls"]].reshape(hc, mc)
            xnodes = v[layout["states"]].reshape(hp, n)
            z0 = v[layout["z0"]] if ocp.extra_initial_state_dof else None
            xs = np.vstack([ocp.x0[None, :], xnodes])
            us = np.empty((hp, mc))
            for k in range(hp):
                us[k] = u_moves[min(k, hc - 1)]
            blocks = ocp.cost.hess(xs, us, z0)
            hx, hu, hz0 = blocks[:3]
            hxz0 = blocks[3] if len(blocks) > 3 else None
            h = np.zeros((nv, nv))
            st0 = layout["states"].start
            for k in range(hp):
                h[st0 + k * n: st0 + (k + 1) * n,
                  st0 + k * n: st0 + (k + 1) * n] = hx[k + 1]
            for k in range(hp):
                j = min(k, hc - 1) * mc
                h[j:j + mc, j:j + mc] += hu[k]
            if ocp.extra_initial_state_dof:
                z0s = layout["z0"]
                if hz0 is not None:
                    h[z0s, z0s] = hz0
                if hxz0 is not None:
                    for k in range(hp):
                        rows = slice(st0 + k * n, st0 + (k + 1) * n)
                        h[rows, z0s] = hxz0[k + 1]
                        h[z0s, rows] = hxz0[k + 1].T
            if n_sl:
                w = ocp.slack_config.weight
                sl = layout["slacks"]
                inv2 = np.tile(1.0 / ocp.x_scale[ocp.slack_config.indices] ** 2,
                               hp)
                h[sl, sl] += np.diag(2.0 * w * inv2)
            return h

    return NlpProblem(n_vars=nv, cost=cost_fn, eq_constraints=eq_fn,
                      var_bounds=(lb, ub), var_layout=layout,
                      var_scale=scale, lin_ineq=lin, cost_hess=hess_fn,
                      value_only=value_fn)
