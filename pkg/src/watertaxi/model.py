"""Vessel model: state types, forces, dynamics, integration, and inverses.

State layout used throughout (9 entries):

    x = (x_l, y_l, psi, u, v, r, n_AT, alpha, n_BT)

pose in an east-north-up frame (yaw stored unwrapped), body velocity, and
actuator state. The controller-internal variant replaces the propeller
rates by thrusts: (F_AT, alpha, F_BT).

All numeric operations route through the jet kernels, so they accept plain
floats/arrays as well as :class:`watertaxi.autodiff.Dual` arguments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .autodiff import Dual
from .currents import CurrentField
from .params import ModelParams

# smoothing width used inside all differentiated optimization models
EPS_SMOOTH = 1e-4

# actuator force box (F_AT [N], alpha [rad], F_BT [N]) and its rate box
FORCE_MAX = np.array([1250.0, np.pi, 250.0])
FORCE_RATE_MAX = np.array([625.0, np.pi / 10.0, 125.0])


class InfeasibleThrustError(ValueError):
    """Requested force has no realizable propeller rate."""


@dataclass
class Pose:
    x_l: float = 0.0
    y_l: float = 0.0
    psi: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x_l, self.y_l, self.psi])


@dataclass
class BodyVelocity:
    u_r: float = 0.0
    v_r: float = 0.0
    r_r: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.u_r, self.v_r, self.r_r])


@dataclass
class ActuatorState:
    n_at: float = 0.0
    alpha: float = 0.0
    n_bt: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.n_at, self.alpha, self.n_bt])


@dataclass
class ForceActuatorState:
    f_at: float = 0.0
    alpha: float = 0.0
    f_bt: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.f_at, self.alpha, self.f_bt])


@dataclass
class GeneralizedForce:
    x: float = 0.0
    y: float = 0.0
    n: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.n])


DisturbanceForce = GeneralizedForce


@dataclass
class VesselState:
    eta: Pose
    nu: BodyVelocity
    a: ActuatorState

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.eta.as_array(), self.nu.as_array(), self.a.as_array()])

    @classmethod
    def from_array(cls, x) -> "VesselState":
        x = np.asarray(x, dtype=float)
        return cls(Pose(*x[0:3]), BodyVelocity(*x[3:6]), ActuatorState(*x[6:9]))


def rotation(psi: float) -> np.ndarray:
    """Yaw rotation J(psi) from body to local frame."""
    c, s = np.cos(psi), np.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return -((-np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi)


# -- jet plumbing -------------------------------------------------------------

def _jet_m(*args) -> int:
    m = 0
    for a in args:
        if isinstance(a, Dual):
            m = max(m, a.m)
    return m


def _to_jets(a, n, m) -> np.ndarray:
    """Pack a scalar/vector/Dual into an (n, 1+m) jet array."""
    out = np.zeros((n, 1 + m))
    if isinstance(a, Dual):
        out[:, 0] = np.atleast_1d(a.val)
        out[:, 1:] = a.der.reshape(n, -1)
    else:
        out[:, 0] = np.atleast_1d(np.asarray(a, dtype=float))
    return out


def _from_jets(jets: np.ndarray, dual: bool):
    vals = jets[:, 0].copy()
    if dual:
        return Dual(vals, jets[:, 1:].copy())
    return vals


def _scalar(x, dual: bool):
    if dual:
        return x  # already Dual scalar
    return float(x)


# -- forces and derived maps --------------------------------------------------

def propeller_force_bt(n_bt, u_r, params: ModelParams, eps: float = 0.0):
    """Bow thruster force c_BT n|n| exp(-d_BT u_r^2)."""
    m = _jet_m(n_bt, u_r)
    nj = _to_jets(n_bt, 1, m)
    nuj = np.zeros((3, 1 + m))
    nuj[0] = _to_jets(u_r, 1, m)[0]
    parj = K.const_jets(params.vec(), m)
    out = K.k_prop_bt(nj[0], nuj[0], parj, eps)
    res = _from_jets(out[None, :], m > 0)
    return res[0] if m > 0 else float(res[0])


def propeller_force_at(n_at, u_a, params: ModelParams, eps: float = 0.0):
    """Azimuth thruster force c_AT n|n| - d_AT u_a |n|."""
    m = _jet_m(n_at, u_a)
    nj = _to_jets(n_at, 1, m)
    uaj = _to_jets(u_a, 1, m)
    parj = K.const_jets(params.vec(), m)
    out = K.k_prop_at(nj[0], uaj[0], parj, eps)
    res = _from_jets(out[None, :], m > 0)
    return res[0] if m > 0 else float(res[0])


def azimuth_inflow(nu, alpha, params: ModelParams):
    """Water velocity along the azimuth thruster axis: u cos(a) + (v - L_AT r) sin(a)."""
    nu = np.asarray(nu, dtype=float)
    return float(
        nu[0] * np.cos(alpha) + (nu[1] - params.l_at * nu[2]) * np.sin(alpha)
    )


def actuator_forces(a, nu, params: ModelParams, eps: float = 0.0):
    """Generalized actuator force tau_a(a, nu) for rate-space a."""
    m = _jet_m(a, nu)
    aj = _to_jets(a, 3, m)
    nuj = _to_jets(nu, 3, m)
    parj = K.const_jets(params.vec(), m)
    return _from_jets(K.k_tau_a(aj, nuj, parj, eps), m > 0)


def damping_force(nu, params: ModelParams, eps: float = 0.0):
    """Hydrodynamic damping generalized force (second-order modulus model)."""
    m = _jet_m(nu)
    nuj = _to_jets(nu, 3, m)
    parj = K.const_jets(params.vec(), m)
    return _from_jets(K.k_damping(nuj, parj, eps), m > 0)


def coriolis_force(nu, params: ModelParams):
    """Rigid-body Coriolis generalized force -C_RB(nu) nu (x_g = 0)."""
    m = _jet_m(nu)
    nuj = _to_jets(nu, 3, m)
    parj = K.const_jets(params.vec(), m)
    return _from_jets(K.k_coriolis(nuj, parj), m > 0)


def power(n_at, n_bt, params: ModelParams, eps: float = 0.0):
    """Propulsion power beta_AT |n_AT|^3 + beta_BT |n_BT|^3 [W]."""
    from .autodiff import smooth_abs

    a_at = smooth_abs(n_at, eps)
    a_bt = smooth_abs(n_bt, eps)
    return params.beta_at * a_at * a_at * a_at + params.beta_bt * a_bt * a_bt * a_bt


def invert_propellers(f_at, f_bt, u_a, u_r, params: ModelParams) -> tuple[float, float]:
    """Propeller rates realizing the requested thrusts at the given inflow.

    Round-trips through the force laws to 1e-9 relative. Raises
    InfeasibleThrustError when the azimuth quadratic has no admissible root
    and ValueError on non-finite input.
    """
    vals = np.array([f_at, f_bt, u_a, u_r], dtype=float)
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite input to invert_propellers")
    c_at, d_at = params.c_at, params.d_at
    if f_at == 0.0:
        n_at = 0.0
    elif d_at == 0.0:
        n_at = float(np.sign(f_at) * np.sqrt(abs(f_at) / c_at))
    else:
        s = np.sign(f_at)
        disc = d_at * d_at * u_a * u_a + 4.0 * c_at * abs(f_at)
        if disc < 0.0:
            raise InfeasibleThrustError(f"azimuth thrust {f_at} N unreachable at u_a={u_a}")
        q = (s * d_at * u_a + np.sqrt(disc)) / (2.0 * c_at)
        if q < 0.0:
            raise InfeasibleThrustError(f"azimuth thrust {f_at} N unreachable at u_a={u_a}")
        n_at = float(s * q)
    c_eff = params.c_bt * np.exp(-params.d_bt * u_r * u_r)
    n_bt = float(np.sign(f_bt) * np.sqrt(abs(f_bt) / c_eff))
    return n_at, n_bt


def force_to_rate_state(a_force, nu, params: ModelParams) -> np.ndarray:
    """Convert (F_AT, alpha, F_BT) to (n_AT, alpha, n_BT) at body velocity nu."""
    a_force = np.asarray(a_force, dtype=float)
    nu = np.asarray(nu, dtype=float)
    u_a = azimuth_inflow(nu, a_force[1], params)
    n_at, n_bt = invert_propellers(a_force[0], a_force[2], u_a, nu[0], params)
    return np.array([n_at, a_force[1], n_bt])


def rate_to_force_state(a_rate, nu, params: ModelParams) -> np.ndarray:
    """Convert (n_AT, alpha, n_BT) to (F_AT, alpha, F_BT) at body velocity nu."""
    a_rate = np.asarray(a_rate, dtype=float)
    nu = np.asarray(nu, dtype=float)
    u_a = azimuth_inflow(nu, a_rate[1], params)
    f_at = propeller_force_at(a_rate[0], u_a, params)
    f_bt = propeller_force_bt(a_rate[2], nu[0], params)
    return np.array([f_at, a_rate[1], f_bt])


def rate_box(params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Admissible actuator-state box in rate space, derived from the force box."""
    n_at_max = np.sqrt(FORCE_MAX[0] / params.c_at)
    n_bt_max = np.sqrt(FORCE_MAX[2] / params.c_bt)
    ub = np.array([n_at_max, FORCE_MAX[1], n_bt_max])
    return -ub, ub


def rate_input_box(params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Actuator rate-of-change box in rate space (force-rate box mapped
    through the maximum thrust slope dF/dn = 2 c n_max)."""
    lo, hi = rate_box(params)
    ub = np.array(
        [
            FORCE_RATE_MAX[0] / (2.0 * params.c_at * hi[0]),
            FORCE_RATE_MAX[1],
            FORCE_RATE_MAX[2] / (2.0 * params.c_bt * hi[2]),
        ]
    )
    return -ub, ub


# -- dynamics -----------------------------------------------------------------

def dynamics_local(x, u, tau_d=None, params: ModelParams | None = None, eps: float = 0.0):
    """Local model: eta_dot = J(psi) nu; M nu_dot = tau_a + tau_d - C nu - N nu; a_dot = u."""
    params = params if params is not None else ModelParams()
    m = _jet_m(x, u, tau_d)
    xj = _to_jets(x, 9, m)
    uj = _to_jets(u, 3, m)
    tj = _to_jets(tau_d if tau_d is not None else np.zeros(3), 3, m)
    parj = K.const_jets(params.vec(), m)
    out = K.k_rhs(K.MODE_LOCAL, xj, uj, tj, parj, K.FIELD_NONE, np.zeros(2), eps)
    return _from_jets(out, m > 0)


def dynamics_local_force(x, u, tau_d=None, params: ModelParams | None = None, eps: float = 0.0):
    """Local model with force-parameterized actuators (F_AT, alpha, F_BT)."""
    params = params if params is not None else ModelParams()
    m = _jet_m(x, u, tau_d)
    xj = _to_jets(x, 9, m)
    uj = _to_jets(u, 3, m)
    tj = _to_jets(tau_d if tau_d is not None else np.zeros(3), 3, m)
    parj = K.const_jets(params.vec(), m)
    out = K.k_rhs(K.MODE_LOCAL_FORCE, xj, uj, tj, parj, K.FIELD_NONE, np.zeros(2), eps)
    return _from_jets(out, m > 0)


def dynamics_current(x, u, field: CurrentField, params: ModelParams | None = None,
                     tau_d=None, eps: float = 0.0):
    """Current-field model over relative velocity (eta, nu_r, a)."""
    params = params if params is not None else ModelParams()
    kind, fp = field.code()
    m = _jet_m(x, u, tau_d)
    xj = _to_jets(x, 9, m)
    uj = _to_jets(u, 3, m)
    tj = _to_jets(tau_d if tau_d is not None else np.zeros(3), 3, m)
    parj = K.const_jets(params.vec(), m)
    out = K.k_rhs(K.MODE_CURRENT, xj, uj, tj, parj, kind, fp, eps)
    return _from_jets(out, m > 0)


def rk4_step(f, x, u, h: float, n_sub: int = 1):
    """Classical RK4 over duration h using n_sub sub-steps, zero-order-hold input.

    Works on plain arrays and on Dual arguments (f must be generic).
    """
    if h <= 0.0:
        raise ValueError("step size must be positive")
    if n_sub < 1:
        raise ValueError("n_sub must be at least 1")
    hh = h / n_sub
    for _ in range(n_sub):
        k1 = f(x, u)
        k2 = f(x + (0.5 * hh) * k1, u)
        k3 = f(x + (0.5 * hh) * k2, u)
        k4 = f(x + hh * k3, u)
        x = x + (hh / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def sample_force_set(params: ModelParams, n_at_pts: int = 13, alpha_pts: int = 25,
                     n_bt_pts: int = 9) -> np.ndarray:
    """Sample the admissible actuator box at nu_r = 0 and map to forces.

    Returns rows (n_AT, alpha, n_BT, X, Y, N) — the reachable generalized
    force cloud (a diagnostic; the set is visibly not a box).
    """
    lo, hi = rate_box(params)
    parj = K.const_jets(params.vec(), 0)
    nuj = np.zeros((3, 1))
    rows = []
    for n_at in np.linspace(lo[0], hi[0], n_at_pts):
        for alpha in np.linspace(-np.pi, np.pi, alpha_pts):
            for n_bt in np.linspace(lo[2], hi[2], n_bt_pts):
                aj = np.array([[n_at], [alpha], [n_bt]])
                tau = K.k_tau_a(aj, nuj, parj, 0.0)
                rows.append([n_at, alpha, n_bt, tau[0, 0], tau[1, 0], tau[2, 0]])
    return np.array(rows)
