"""Hot numeric kernels: digester right-hand side, RK4 stepping and forward
sensitivity propagation.

Two interchangeable lanes share this single source: a numba ``@njit`` lane
(default when numba is importable) and a pure-numpy lane. Select with the
environment variable ``TUBE_NMPC_BACKEND=numpy`` or ``=numba`` (read once at
import). Everything downstream (integrator, NLP, harness) calls through these
functions, so the whole package switches lanes together.

All kernels operate on packed float64 arrays, not on the dataclasses from
:mod:`tube_nmpc.model`; the packing convention is fixed by ``KIN_*`` below and
by the state layout [xt_1..xt_m, x1, x2, s1, s2, c, z].
"""

import os

import numpy as np

_BACKEND = os.environ.get("TUBE_NMPC_BACKEND", "").strip().lower()
if _BACKEND not in ("", "auto", "numpy", "numba"):
    raise ValueError(
        f"TUBE_NMPC_BACKEND must be 'numpy' or 'numba', got {_BACKEND!r}"
    )

if _BACKEND == "numpy":
    USING_NUMBA = False
else:
    try:
        from numba import njit

        USING_NUMBA = True
    except ImportError:
        if _BACKEND == "numba":
            raise
        USING_NUMBA = False


def backend_name() -> str:
    return "numba" if USING_NUMBA else "numpy"


def _jit(fn):
    if USING_NUMBA:
        return njit(cache=True)(fn)
    return fn


# Packing order of the kinetic/stoichiometric constants (KineticParams.pack()).
(
    KIN_MUMAX1,
    KIN_MUMAX2,
    KIN_KS1,
    KIN_KS2,
    KIN_KI2,
    KIN_K1,
    KIN_K2,
    KIN_K3,
    KIN_K4,
    KIN_K5,
    KIN_K6,
    KIN_KLA,
    KIN_KHPC,
) = range(13)
N_KIN = 13

# ratio = q_C/q_M clamp, see model.outputs
Q_EPS = 1e-9
RATIO_CAP = 10.0


def _monod(s, mu_max, ks):
    sp = s if s > 0.0 else 0.0
    return mu_max * sp / (sp + ks)


def _haldane(s, mu_max, ks, ki):
    sp = s if s > 0.0 else 0.0
    return mu_max * sp / (sp + ks + sp * sp / ki)


_monod = _jit(_monod)
_haldane = _jit(_haldane)


def _rhs(x, flows, theta_u, khyd, kin, volume, mu2f):
    m = khyd.shape[0]
    n = m + 6
    dx = np.zeros(n)

    utot = 0.0
    for i in range(m):
        utot += flows[i]
    dil = utot / volume
    # Transport written as sum(u_i theta_i)/V - D x so that it stays defined
    # (and zero) when all flows vanish.
    for j in range(n):
        inflow = 0.0
        for i in range(m):
            inflow += flows[i] * theta_u[i, j]
        dx[j] = inflow / volume - dil * x[j]

    x1 = x[m]
    x2 = x[m + 1]
    s1 = x[m + 2]
    s2 = x[m + 3]
    c = x[m + 4]
    mu1 = _monod(s1, kin[KIN_MUMAX1], kin[KIN_KS1])
    mu2 = _haldane(s2, mu2f * kin[KIN_MUMAX2], kin[KIN_KS2], kin[KIN_KI2])
    r1 = mu1 * x1
    r2 = mu2 * x2

    hyd = 0.0
    for i in range(m):
        h = khyd[i] * x[i]
        dx[i] -= h
        hyd += h
    dx[m] += r1
    dx[m + 1] += r2
    dx[m + 2] += hyd - kin[KIN_K1] * r1
    dx[m + 3] += kin[KIN_K2] * r1 - kin[KIN_K3] * r2
    qc = kin[KIN_KLA] * (c - kin[KIN_KHPC]) if c > kin[KIN_KHPC] else 0.0
    dx[m + 4] += kin[KIN_K4] * r1 + kin[KIN_K5] * r2 - qc
    # dx[m+5] (alkalinity): transport only
    return dx


_rhs = _jit(_rhs)


def _rhs_jac(x, flows, theta_u, khyd, kin, volume, mu2f):
    """Right-hand side plus its Jacobians w.r.t. state and flows."""
    m = khyd.shape[0]
    n = m + 6
    dx = _rhs(x, flows, theta_u, khyd, kin, volume, mu2f)

    jx = np.zeros((n, n))
    ju = np.zeros((n, m))

    utot = 0.0
    for i in range(m):
        utot += flows[i]
    dil = utot / volume
    for j in range(n):
        jx[j, j] -= dil
        for i in range(m):
            ju[j, i] = (theta_u[i, j] - x[j]) / volume

    x1 = x[m]
    x2 = x[m + 1]
    s1 = x[m + 2]
    s2 = x[m + 3]
    c = x[m + 4]
    s1p = s1 if s1 > 0.0 else 0.0
    s2p = s2 if s2 > 0.0 else 0.0

    mu1 = _monod(s1, kin[KIN_MUMAX1], kin[KIN_KS1])
    den1 = s1p + kin[KIN_KS1]
    dmu1 = kin[KIN_MUMAX1] * kin[KIN_KS1] / (den1 * den1) if s1 > 0.0 else 0.0

    mu_max2 = mu2f * kin[KIN_MUMAX2]
    mu2 = _haldane(s2, mu_max2, kin[KIN_KS2], kin[KIN_KI2])
    den2 = s2p + kin[KIN_KS2] + s2p * s2p / kin[KIN_KI2]
    if s2 > 0.0:
        dmu2 = mu_max2 * (kin[KIN_KS2] - s2p * s2p / kin[KIN_KI2]) / (den2 * den2)
    else:
        dmu2 = 0.0

    ix1, ix2, is1, is2, ic = m, m + 1, m + 2, m + 3, m + 4

    for i in range(m):
        jx[i, i] -= khyd[i]
        jx[is1, i] += khyd[i]

    jx[ix1, ix1] += mu1
    jx[ix1, is1] += dmu1 * x1
    jx[ix2, ix2] += mu2
    jx[ix2, is2] += dmu2 * x2
    jx[is1, ix1] -= kin[KIN_K1] * mu1
    jx[is1, is1] -= kin[KIN_K1] * dmu1 * x1
    jx[is2, ix1] += kin[KIN_K2] * mu1
    jx[is2, is1] += kin[KIN_K2] * dmu1 * x1
    jx[is2, ix2] -= kin[KIN_K3] * mu2
    jx[is2, is2] -= kin[KIN_K3] * dmu2 * x2
    jx[ic, ix1] += kin[KIN_K4] * mu1
    jx[ic, is1] += kin[KIN_K4] * dmu1 * x1
    jx[ic, ix2] += kin[KIN_K5] * mu2
    jx[ic, is2] += kin[KIN_K5] * dmu2 * x2
    if c > kin[KIN_KHPC]:
        jx[ic, ic] -= kin[KIN_KLA]
    return dx, jx, ju


_rhs_jac = _jit(_rhs_jac)


def _rk4_step(x, flows, dt, theta_u, khyd, kin, volume, mu2f):
    k1 = _rhs(x, flows, theta_u, khyd, kin, volume, mu2f)
    k2 = _rhs(x + 0.5 * dt * k1, flows, theta_u, khyd, kin, volume, mu2f)
    k3 = _rhs(x + 0.5 * dt * k2, flows, theta_u, khyd, kin, volume, mu2f)
    k4 = _rhs(x + dt * k3, flows, theta_u, khyd, kin, volume, mu2f)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


_rk4_step = _jit(_rk4_step)


def rk4_interval(x0, flows, mu2f, dt, theta_u, khyd, kin, volume, clamp):
    """Integrate one control interval on a fixed substep grid.

    flows: (n_sub, m) piecewise-constant flows per substep.
    mu2f:  (n_sub,) multiplicative factor on mu_max2 per substep.
    Returns (traj, clamped_mass): traj has shape (n_sub+1, n); clamped_mass is
    the summed magnitude of negative overshoots zeroed out (only when clamp).
    """
    n_sub = flows.shape[0]
    n = x0.shape[0]
    traj = np.empty((n_sub + 1, n))
    traj[0] = x0
    clamped = 0.0
    x = x0.copy()
    for k in range(n_sub):
        x = _rk4_step(x, flows[k], dt, theta_u, khyd, kin, volume, mu2f[k])
        if clamp:
            for j in range(n):
                if x[j] < 0.0:
                    clamped -= x[j]
                    x[j] = 0.0
        traj[k + 1] = x
    return traj, clamped


rk4_interval = _jit(rk4_interval)


def rk4_interval_sens(x0, flows, mu2f, dt, theta_u, khyd, kin, volume):
    """Integrate one interval propagating exact RK4 sensitivities.

    Returns (x_end, Sx, Su) with Sx = d x_end/d x0 (n, n) and
    Su = d x_end/d flows (n, m); the flow perturbation is applied uniformly
    over every substep of the interval (piecewise-constant controls).
    No nonnegativity clamping: this path must stay smooth for the NLP.
    """
    n_sub = flows.shape[0]
    n = x0.shape[0]
    m = flows.shape[1]
    eye = np.eye(n)
    sx = np.eye(n)
    su = np.zeros((n, m))
    x = x0.copy()
    for k in range(n_sub):
        f = flows[k]
        mf = mu2f[k]
        k1, a1, b1 = _rhs_jac(x, f, theta_u, khyd, kin, volume, mf)
        x2s = x + 0.5 * dt * k1
        k2, a2, b2 = _rhs_jac(x2s, f, theta_u, khyd, kin, volume, mf)
        x3s = x + 0.5 * dt * k2
        k3, a3, b3 = _rhs_jac(x3s, f, theta_u, khyd, kin, volume, mf)
        x4s = x + dt * k3
        k4, a4, b4 = _rhs_jac(x4s, f, theta_u, khyd, kin, volume, mf)

        k1x = a1
        k2x = a2 @ (eye + 0.5 * dt * k1x)
        k3x = a3 @ (eye + 0.5 * dt * k2x)
        k4x = a4 @ (eye + dt * k3x)
        step_x = eye + (dt / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)

        k1u = b1
        k2u = b2 + a2 @ (0.5 * dt * k1u)
        k3u = b3 + a3 @ (0.5 * dt * k2u)
        k4u = b4 + a4 @ (dt * k3u)
        step_u = (dt / 6.0) * (k1u + 2.0 * k2u + 2.0 * k3u + k4u)

        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        su = step_x @ su + step_u
        sx = step_x @ sx
    return x, sx, su


rk4_interval_sens = _jit(rk4_interval_sens)


def rk4_horizon_sens(x_starts, flows, mu2f, dt, theta_u, khyd, kin, volume):
    """Batched rk4_interval_sens over independent shooting intervals.

    x_starts: (H, n) node states, flows: (H, n_sub, m), mu2f: (H, n_sub).
    Returns (x_ends (H, n), sx_all (H, n, n), su_all (H, n, m)). One call
    covers a whole multiple-shooting horizon, keeping the per-evaluation
    Python overhead independent of the horizon length.
    """
    hp = x_starts.shape[0]
    n = x_starts.shape[1]
    m = flows.shape[2]
    x_ends = np.empty((hp, n))
    sx_all = np.empty((hp, n, n))
    su_all = np.empty((hp, n, m))
    for t in range(hp):
        xe, sx, su = rk4_interval_sens(
            x_starts[t], flows[t], mu2f[t], dt, theta_u, khyd, kin, volume)
        x_ends[t] = xe
        sx_all[t] = sx
        su_all[t] = su
    return x_ends, sx_all, su_all


rk4_horizon_sens = _jit(rk4_horizon_sens)


def rk4_horizon(x_starts, flows, mu2f, dt, theta_u, khyd, kin, volume):
    """Batched interval rollout without sensitivities.

    Same shapes as rk4_horizon_sens but returns only x_ends (H, n); the cheap
    lane for line-search trial points where no derivatives are needed."""
    hp = x_starts.shape[0]
    n = x_starts.shape[1]
    x_ends = np.empty((hp, n))
    for t in range(hp):
        n_sub = flows.shape[1]
        x = x_starts[t].copy()
        for k in range(n_sub):
            x = _rk4_step(x, flows[t, k], dt, theta_u, khyd, kin, volume,
                          mu2f[t, k])
        x_ends[t] = x
    return x_ends


rk4_horizon = _jit(rk4_horizon)


def rk4_chain(z0, flows, mu2f, dt, theta_u, khyd, kin, volume):
    """Sequential rollout over Hp intervals without sensitivities.

    flows: (Hp, n_sub, m). Returns zs (Hp+1, n)."""
    hp = flows.shape[0]
    n = z0.shape[0]
    zs = np.empty((hp + 1, n))
    zs[0] = z0
    x = z0.copy()
    for t in range(hp):
        n_sub = flows.shape[1]
        for k in range(n_sub):
            x = _rk4_step(x, flows[t, k], dt, theta_u, khyd, kin, volume,
                          mu2f[t, k])
        zs[t + 1] = x
    return zs


rk4_chain = _jit(rk4_chain)


def rk4_chain_sens(z0, flows, mu2f, dt, theta_u, khyd, kin, volume):
    """Sequential rollout over Hp intervals with accumulated sensitivities.

    flows: (Hp, n_sub, m). Returns (zs (Hp+1, n), gs (Hp+1, n, n)) where
    gs[t] = d zs[t] / d z0 chained through every interval.
    """
    hp = flows.shape[0]
    n = z0.shape[0]
    zs = np.empty((hp + 1, n))
    gs = np.empty((hp + 1, n, n))
    zs[0] = z0
    gs[0] = np.eye(n)
    for k in range(hp):
        z_next, sx, _ = rk4_interval_sens(
            zs[k], flows[k], mu2f[k], dt, theta_u, khyd, kin, volume)
        zs[k + 1] = z_next
        gs[k + 1] = sx @ gs[k]
    return zs, gs


rk4_chain_sens = _jit(rk4_chain_sens)


def output_traj_jac(xs, kin, m, mu2f):
    """Batched output_jac over a state trajectory.

    xs: (T, n), mu2f: (T,). Returns (ys (T, 2), jys (T, 2, n)).
    """
    t_len = xs.shape[0]
    n = xs.shape[1]
    ys = np.empty((t_len, 2))
    jys = np.zeros((t_len, 2, n))
    for t in range(t_len):
        y, jy = output_jac(xs[t], kin, m, mu2f[t])
        ys[t] = y
        jys[t] = jy
    return ys, jys


output_traj_jac = _jit(output_traj_jac)


def output_vec(x, kin, m, mu2f):
    """Measurement map: (q_M, CO2/CH4 ratio)."""
    x2 = x[m + 1]
    s2 = x[m + 3]
    c = x[m + 4]
    mu2 = _haldane(s2, mu2f * kin[KIN_MUMAX2], kin[KIN_KS2], kin[KIN_KI2])
    qm = kin[KIN_K6] * mu2 * x2
    qc = kin[KIN_KLA] * (c - kin[KIN_KHPC]) if c > kin[KIN_KHPC] else 0.0
    ratio = qc / qm if qm >= Q_EPS else RATIO_CAP
    out = np.empty(2)
    out[0] = qm
    out[1] = ratio
    return out


output_vec = _jit(output_vec)


def output_jac(x, kin, m, mu2f):
    """Measurement map plus its Jacobian w.r.t. the state, shape (2, n)."""
    n = x.shape[0]
    x2 = x[m + 1]
    s2 = x[m + 3]
    c = x[m + 4]
    s2p = s2 if s2 > 0.0 else 0.0
    mu_max2 = mu2f * kin[KIN_MUMAX2]
    mu2 = _haldane(s2, mu_max2, kin[KIN_KS2], kin[KIN_KI2])
    den2 = s2p + kin[KIN_KS2] + s2p * s2p / kin[KIN_KI2]
    if s2 > 0.0:
        dmu2 = mu_max2 * (kin[KIN_KS2] - s2p * s2p / kin[KIN_KI2]) / (den2 * den2)
    else:
        dmu2 = 0.0
    qm = kin[KIN_K6] * mu2 * x2
    dqm_dx2 = kin[KIN_K6] * mu2
    dqm_ds2 = kin[KIN_K6] * dmu2 * x2
    qc = kin[KIN_KLA] * (c - kin[KIN_KHPC]) if c > kin[KIN_KHPC] else 0.0
    dqc_dc = kin[KIN_KLA] if c > kin[KIN_KHPC] else 0.0

    y = np.empty(2)
    jy = np.zeros((2, n))
    y[0] = qm
    jy[0, m + 1] = dqm_dx2
    jy[0, m + 3] = dqm_ds2
    if qm >= Q_EPS:
        y[1] = qc / qm
        jy[1, m + 4] = dqc_dc / qm
        jy[1, m + 1] = -qc * dqm_dx2 / (qm * qm)
        jy[1, m + 3] = -qc * dqm_ds2 / (qm * qm)
    else:
        y[1] = RATIO_CAP
    return y, jy


output_jac = _jit(output_jac)
