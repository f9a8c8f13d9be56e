"""Hot numeric kernels: first-order jet arithmetic and vessel dynamics.

A *jet* is a float64 array of shape (1+m,): slot 0 holds the value, slots
1..m hold directional derivatives along m seed directions. Propagating jets
through the dynamics gives forward-mode derivatives that are exact to
machine precision; with m = 0 the same code is a plain value evaluation.

Every function here is numba-compiled unless the pure-numpy fallback is
selected (see watertaxi.accel). Parameters enter as jets too, so the same
kernels serve parameter identification (seeds on theta), trajectory
optimization (seeds on states/inputs/duration), and the plant simulator
(no seeds).

``eps`` selects the smoothed modulus sqrt(s^2 + eps^2) used inside all
differentiated model code; the plant passes eps = 0 for the exact forms.
"""

import numpy as np

from .accel import njit
from .params import (
    N_PARAMS,
    P_BETA_AT, P_BETA_BT,
    P_CAT, P_CBT, P_DAT, P_DBT,
    P_JCOMB, P_LAT, P_LBT, P_M,
    P_NARV, P_NAVR, P_NDV, P_NR, P_NRR, P_NUR, P_NUV, P_NV, P_NVV,
    P_XDU, P_XRR, P_XU, P_XUU, P_XVR,
    P_YARV, P_YAVR, P_YDR, P_YDV, P_YR, P_YRR, P_YUR, P_YUV, P_YV, P_YVV,
)

# dynamics variants for the RK4 dispatcher
MODE_LOCAL = 0          # local model, rate-space actuators (n_AT, alpha, n_BT)
MODE_CURRENT = 1        # current-field model, rate-space actuators
MODE_LOCAL_FORCE = 2    # local model, force-space actuators (F_AT, alpha, F_BT)

# current field kinds
FIELD_NONE = 0
FIELD_UNIFORM = 1       # fp = (vx, vy)
FIELD_RIVER = 2         # fp = (v_peak, half_width); flow along +x, banks at y = +-half_width


@njit
def jcon(value, m):
    out = np.zeros(1 + m)
    out[0] = value
    return out


@njit
def jmul(a, b):
    out = np.empty_like(a)
    out[0] = a[0] * b[0]
    out[1:] = a[0] * b[1:] + b[0] * a[1:]
    return out


@njit
def jdiv(a, b):
    out = np.empty_like(a)
    out[0] = a[0] / b[0]
    out[1:] = (a[1:] - out[0] * b[1:]) / b[0]
    return out


@njit
def jsabs(a, eps):
    """Smoothed modulus sqrt(a^2 + eps^2); exact |a| for eps = 0."""
    out = np.empty_like(a)
    v = np.sqrt(a[0] * a[0] + eps * eps)
    out[0] = v
    if v > 0.0:
        out[1:] = (a[0] / v) * a[1:]
    else:
        out[1:] = 0.0
    return out


@njit
def jsin(a):
    out = np.empty_like(a)
    out[0] = np.sin(a[0])
    out[1:] = np.cos(a[0]) * a[1:]
    return out


@njit
def jcos(a):
    out = np.empty_like(a)
    out[0] = np.cos(a[0])
    out[1:] = -np.sin(a[0]) * a[1:]
    return out


@njit
def jexp(a):
    out = np.empty_like(a)
    out[0] = np.exp(a[0])
    out[1:] = out[0] * a[1:]
    return out


@njit
def jsqrt(a):
    out = np.empty_like(a)
    v = np.sqrt(a[0])
    out[0] = v
    if v > 0.0:
        out[1:] = a[1:] / (2.0 * v)
    else:
        out[1:] = 0.0
    return out


@njit
def jpow(a, p):
    """a**p for a strictly positive value slot."""
    out = np.empty_like(a)
    out[0] = a[0] ** p
    out[1:] = p * a[0] ** (p - 1.0) * a[1:]
    return out


@njit
def const_jets(values, m):
    out = np.zeros((values.shape[0], 1 + m))
    out[:, 0] = values
    return out


@njit
def k_inflow_at(nuj, alpha_sin, alpha_cos, parj):
    """Water velocity along the azimuth thruster axis at the stern."""
    u_r = nuj[0]
    lat_r = jmul(parj[P_LAT], nuj[2])
    return jmul(u_r, alpha_cos) + jmul(nuj[1] - lat_r, alpha_sin)


@njit
def k_prop_at(n_at, u_a, parj, eps):
    an = jsabs(n_at, eps)
    return jmul(parj[P_CAT], jmul(n_at, an)) - jmul(parj[P_DAT], jmul(u_a, an))


@njit
def k_prop_bt(n_bt, u_r, parj, eps):
    an = jsabs(n_bt, eps)
    damp = jexp(-jmul(parj[P_DBT], jmul(u_r, u_r)))
    return jmul(parj[P_CBT], jmul(jmul(n_bt, an), damp))


@njit
def k_tau_from_forces(f_at, alpha, f_bt, parj):
    """Generalized force (X, Y, N) from monotone thrusts and azimuth angle."""
    sa = jsin(alpha)
    ca = jcos(alpha)
    out = np.empty((3, f_at.shape[0]))
    out[0] = jmul(f_at, ca)
    out[1] = jmul(f_at, sa) + f_bt
    out[2] = jmul(f_bt, parj[P_LBT]) - jmul(jmul(f_at, parj[P_LAT]), sa)
    return out


@njit
def k_tau_a(aj, nuj, parj, eps):
    """Actuator configuration map in rate space: a = (n_AT, alpha, n_BT)."""
    alpha = aj[1]
    sa = jsin(alpha)
    ca = jcos(alpha)
    u_a = k_inflow_at(nuj, sa, ca, parj)
    f_at = k_prop_at(aj[0], u_a, parj, eps)
    f_bt = k_prop_bt(aj[2], nuj[0], parj, eps)
    out = np.empty((3, aj.shape[1]))
    out[0] = jmul(f_at, ca)
    out[1] = jmul(f_at, sa) + f_bt
    out[2] = jmul(f_bt, parj[P_LBT]) - jmul(jmul(f_at, parj[P_LAT]), sa)
    return out


@njit
def k_damping(nuj, parj, eps):
    """Hydrodynamic damping as an additive generalized force (-N(nu) nu)."""
    u = nuj[0]
    v = nuj[1]
    r = nuj[2]
    au = jsabs(u, eps)
    av = jsabs(v, eps)
    ar = jsabs(r, eps)
    out = np.empty((3, nuj.shape[1]))
    out[0] = (
        jmul(parj[P_XU], u)
        + jmul(parj[P_XUU], jmul(au, u))
        + jmul(parj[P_XVR], jmul(v, r))
        + jmul(parj[P_XRR], jmul(r, r))
    )
    out[1] = (
        jmul(parj[P_YV], v)
        + jmul(parj[P_YR], r)
        + jmul(parj[P_YVV], jmul(av, v))
        + jmul(parj[P_YRR], jmul(ar, r))
        + jmul(parj[P_YUV], jmul(u, v))
        + jmul(parj[P_YUR], jmul(u, r))
        + jmul(parj[P_YAVR], jmul(av, r))
        + jmul(parj[P_YARV], jmul(ar, v))
    )
    out[2] = (
        jmul(parj[P_NV], v)
        + jmul(parj[P_NR], r)
        + jmul(parj[P_NVV], jmul(av, v))
        + jmul(parj[P_NRR], jmul(ar, r))
        + jmul(parj[P_NUV], jmul(u, v))
        + jmul(parj[P_NUR], jmul(u, r))
        + jmul(parj[P_NAVR], jmul(av, r))
        + jmul(parj[P_NARV], jmul(ar, v))
    )
    return out


@njit
def k_coriolis(nuj, parj):
    """Rigid-body Coriolis as an additive force: -C_RB(nu) nu with x_g = 0."""
    out = np.empty((3, nuj.shape[1]))
    out[0] = jmul(parj[P_M], jmul(nuj[1], nuj[2]))
    out[1] = -jmul(parj[P_M], jmul(nuj[0], nuj[2]))
    out[2] = jcon(0.0, nuj.shape[1] - 1)
    return out


@njit
def k_apply_minv(parj, fj):
    """Solve M nudot = f with the block-sparse mass matrix."""
    m11 = parj[P_M] - parj[P_XDU]
    m22 = parj[P_M] - parj[P_YDV]
    m23 = -parj[P_YDR]
    m32 = -parj[P_NDV]
    m33 = parj[P_JCOMB]
    det = jmul(m22, m33) - jmul(m23, m32)
    out = np.empty_like(fj)
    out[0] = jdiv(fj[0], m11)
    out[1] = jdiv(jmul(m33, fj[1]) - jmul(m23, fj[2]), det)
    out[2] = jdiv(jmul(m22, fj[2]) - jmul(m32, fj[1]), det)
    return out


@njit
def k_current(kind, fp, xj, yj):
    """Current velocity and its spatial gradient at a position, as jets.

    Returns (vel (2,1+m), grad (2,2,1+m)) with grad[i, j] = d vel_i / d pos_j.
    """
    n = xj.shape[0]
    vel = np.zeros((2, n))
    grad = np.zeros((2, 2, n))
    if kind == FIELD_UNIFORM:
        vel[0, 0] = fp[0]
        vel[1, 0] = fp[1]
    elif kind == FIELD_RIVER:
        v_peak = fp[0]
        w = fp[1]
        yw = yj[0] / w
        # v_x = v_peak (1 - (y/w)^2), zero at the banks
        vel[0, 0] = v_peak * (1.0 - yw * yw)
        vel[0, 1:] = -2.0 * v_peak * yj[0] / (w * w) * yj[1:]
        grad[0, 1, 0] = -2.0 * v_peak * yj[0] / (w * w)
        grad[0, 1, 1:] = -2.0 * v_peak / (w * w) * yj[1:]
    return vel, grad


@njit
def k_rhs(mode, xj, uj, taudj, parj, kind, fp, eps):
    """State derivative of the 9-state vessel model, one of three variants."""
    n = xj.shape[1]
    psi = xj[2]
    sa = jsin(psi)
    ca = jcos(psi)
    nu = xj[3:6]
    out = np.empty_like(xj)

    if mode == MODE_CURRENT:
        velc, gradc = k_current(kind, fp, xj[0], xj[1])
        # eta_dot = J(psi) nu_r + eta_dot_c
        ex = jmul(ca, nu[0]) - jmul(sa, nu[1]) + velc[0]
        ey = jmul(sa, nu[0]) + jmul(ca, nu[1]) + velc[1]
        out[0] = ex
        out[1] = ey
        out[2] = nu[2]
        # body-frame current and its total time derivative
        ncx = jmul(ca, velc[0]) + jmul(sa, velc[1])
        ncy = -jmul(sa, velc[0]) + jmul(ca, velc[1])
        wx = jmul(gradc[0, 0], ex) + jmul(gradc[0, 1], ey)
        wy = jmul(gradc[1, 0], ex) + jmul(gradc[1, 1], ey)
        ndcx = jmul(nu[2], ncy) + jmul(ca, wx) + jmul(sa, wy)
        ndcy = -jmul(nu[2], ncx) - jmul(sa, wx) + jmul(ca, wy)
        nutot = np.empty((3, n))
        nutot[0] = nu[0] + ncx
        nutot[1] = nu[1] + ncy
        nutot[2] = nu[2]
        force = (
            k_tau_a(xj[6:9], nu, parj, eps)
            + taudj
            + k_coriolis(nutot, parj)
            + k_damping(nu, parj, eps)
        )
        force[0] -= jmul(parj[P_M], ndcx)
        force[1] -= jmul(parj[P_M], ndcy)
        out[3:6] = k_apply_minv(parj, force)
    else:
        out[0] = jmul(ca, nu[0]) - jmul(sa, nu[1])
        out[1] = jmul(sa, nu[0]) + jmul(ca, nu[1])
        out[2] = nu[2]
        if mode == MODE_LOCAL_FORCE:
            tau = k_tau_from_forces(xj[6], xj[7], xj[8], parj)
        else:
            tau = k_tau_a(xj[6:9], nu, parj, eps)
        force = tau + taudj + k_coriolis(nu, parj) + k_damping(nu, parj, eps)
        out[3:6] = k_apply_minv(parj, force)

    out[6] = uj[0]
    out[7] = uj[1]
    out[8] = uj[2]
    return out


@njit
def k_rk4(mode, xj, uj, taudj, parj, kind, fp, tj, h, nsub, eps):
    """Classical RK4 over duration h (nsub sub-steps), input held constant.

    The right-hand side is scaled by the jet ``tj`` (duration decision
    variable of the free-final-time transcription; pass a unit jet
    otherwise).
    """
    x = xj.copy()
    hh = h / nsub
    for _ in range(nsub):
        k1 = k_rhs(mode, x, uj, taudj, parj, kind, fp, eps)
        for i in range(9):
            k1[i] = jmul(tj, k1[i])
        k2 = k_rhs(mode, x + 0.5 * hh * k1, uj, taudj, parj, kind, fp, eps)
        for i in range(9):
            k2[i] = jmul(tj, k2[i])
        k3 = k_rhs(mode, x + 0.5 * hh * k2, uj, taudj, parj, kind, fp, eps)
        for i in range(9):
            k3[i] = jmul(tj, k3[i])
        k4 = k_rhs(mode, x + hh * k3, uj, taudj, parj, kind, fp, eps)
        for i in range(9):
            k4[i] = jmul(tj, k4[i])
        x = x + (hh / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


@njit
def k_shoot_plan(X, U, T, par, kind, fp, h, nsub, eps, with_jac):
    """Shooting map of the free-final-time transcription, all intervals.

    Seeds (when with_jac): 9 state directions, 3 input directions, then the
    duration T. Returns (N, 9, 1+m) jets of x_{k+1} = F(x_k, u_k, T).
    """
    nint = U.shape[0]
    m = 13 if with_jac else 0
    out = np.empty((nint, 9, 1 + m))
    parj = const_jets(par, m)
    taudj = np.zeros((3, 1 + m))
    for k in range(nint):
        xj = np.zeros((9, 1 + m))
        xj[:, 0] = X[k]
        uj = np.zeros((3, 1 + m))
        uj[:, 0] = U[k]
        tj = np.zeros(1 + m)
        tj[0] = T
        if with_jac:
            for i in range(9):
                xj[i, 1 + i] = 1.0
            for i in range(3):
                uj[i, 10 + i] = 1.0
            tj[13] = 1.0
        out[k] = k_rk4(MODE_CURRENT, xj, uj, taudj, parj, kind, fp, tj, h, nsub, eps)
    return out


@njit
def k_shoot_nmpc(X, U, taud, par, dt, nsub, eps, with_jac):
    """Shooting map of the tracking OCP (force-space actuators, fixed dt)."""
    nint = U.shape[0]
    m = 12 if with_jac else 0
    out = np.empty((nint, 9, 1 + m))
    parj = const_jets(par, m)
    taudj = const_jets(taud, m)
    fp = np.zeros(2)
    tj = jcon(1.0, m)
    for k in range(nint):
        xj = np.zeros((9, 1 + m))
        xj[:, 0] = X[k]
        uj = np.zeros((3, 1 + m))
        uj[:, 0] = U[k]
        if with_jac:
            for i in range(9):
                xj[i, 1 + i] = 1.0
            for i in range(3):
                uj[i, 10 + i] = 1.0
        out[k] = k_rk4(MODE_LOCAL_FORCE, xj, uj, taudj, parj, FIELD_NONE, fp, tj, dt, nsub, eps)
    return out


@njit
def k_rhs6(etanuj, aj, parj, eps):
    """Pose+velocity derivative with the actuator state as an exogenous input."""
    n = etanuj.shape[1]
    psi = etanuj[2]
    sa = jsin(psi)
    ca = jcos(psi)
    nu = etanuj[3:6]
    out = np.empty_like(etanuj)
    out[0] = jmul(ca, nu[0]) - jmul(sa, nu[1])
    out[1] = jmul(sa, nu[0]) + jmul(ca, nu[1])
    out[2] = nu[2]
    force = k_tau_a(aj, nu, parj, eps) + k_coriolis(nu, parj) + k_damping(nu, parj, eps)
    out[3:6] = k_apply_minv(parj, force)
    return out


@njit
def k_sysid_sim(y1, aseq, parj, dt, nsub, eps):
    """Open-loop simulation of one measurement sequence, anchored at y1.

    The recorded actuator states drive the model (zero-order hold); parameter
    seeds arrive through ``parj``. Returns (K, 6, 1+m) jets of the predicted
    measurements.
    """
    kk = aseq.shape[0]
    m = parj.shape[1] - 1
    out = np.zeros((kk, 6, 1 + m))
    out[0, :, 0] = y1
    x = np.zeros((6, 1 + m))
    x[:, 0] = y1
    hh = dt / nsub
    for k in range(kk - 1):
        aj = np.zeros((3, 1 + m))
        aj[:, 0] = aseq[k]
        for _ in range(nsub):
            k1 = k_rhs6(x, aj, parj, eps)
            k2 = k_rhs6(x + 0.5 * hh * k1, aj, parj, eps)
            k3 = k_rhs6(x + 0.5 * hh * k2, aj, parj, eps)
            k4 = k_rhs6(x + hh * k3, aj, parj, eps)
            x = x + (hh / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k + 1] = x
    return out


@njit
def k_plant_step(x, u, taud, par, kind, fp, dt, nsub):
    """Value-only plant integration of the current-field model (exact forms)."""
    xj = const_jets(x, 0)
    uj = const_jets(u, 0)
    taudj = const_jets(taud, 0)
    parj = const_jets(par, 0)
    tj = jcon(1.0, 0)
    out = k_rk4(MODE_CURRENT, xj, uj, taudj, parj, kind, fp, tj, dt, nsub, 0.0)
    return out[:, 0].copy()


def warmup() -> None:
    """Trigger compilation of all kernels on tiny inputs."""
    par = np.ones(N_PARAMS)
    par[P_M] = 3100.0
    par[P_JCOMB] = 21000.0
    x = np.zeros(9)
    u = np.zeros(3)
    fp = np.array([0.5, 50.0])
    k_plant_step(x, u, np.zeros(3), par, FIELD_RIVER, fp, 0.25, 2)
    X = np.zeros((2, 9))
    U = np.zeros((1, 3))
    k_shoot_plan(X[:1], U, 10.0, par, FIELD_NONE, fp, 0.5, 1, 1e-4, True)
    k_shoot_plan(X[:1], U, 10.0, par, FIELD_NONE, fp, 0.5, 1, 1e-4, False)
    k_shoot_nmpc(X[:1], U, np.zeros(3), par, 0.25, 1, 1e-4, True)
    k_shoot_nmpc(X[:1], U, np.zeros(3), par, 0.25, 1, 1e-4, False)
    k_sysid_sim(np.zeros(6), np.zeros((2, 3)), const_jets(par, 2), 0.5, 1, 1e-4)
