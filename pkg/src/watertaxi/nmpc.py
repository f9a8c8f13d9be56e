"""Trajectory-tracking NMPC with embedded control allocation.

The controller model is the local vessel model with force-parameterized
actuators (F_AT, alpha, F_BT) — linear in the thrusts, no allocation
singularities — and the estimated disturbance held constant over the
horizon. Each step solves a multiple-shooting NLP (horizon N, step dt)
warm-started by shifting the previous solution; the first input is applied
and the commanded propeller rates are recovered through the force-law
inverses.

Transit mode zeroes the bow-thruster rate bounds, which freezes (and with
zero initial state, disables) the bow thruster.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import kernels as K
from . import model
from . import nlp
from .params import ModelParams

NMPC_LOG_SCHEMA = "watertaxi-nmpclog-v1"


@dataclass
class NmpcConfig:
    horizon: int = 60
    dt: float = 0.25
    a_max: np.ndarray = dc_field(default_factory=lambda: model.FORCE_MAX.copy())
    u_max: np.ndarray = dc_field(default_factory=lambda: model.FORCE_RATE_MAX.copy())
    q_eta: np.ndarray = dc_field(default_factory=lambda: np.array([1.0, 1.0, 10.0]))
    q_nu: np.ndarray = dc_field(default_factory=lambda: np.array([1.0, 1.0, 10.0]))
    r_u: np.ndarray = dc_field(default_factory=lambda: np.array([10.0, 0.1, 10.0]))
    n_st: int = 1
    mode: str = "docking"  # docking (fully actuated) | transit
    max_sqp_iter: int = 12

    def __post_init__(self):
        self.a_max = np.asarray(self.a_max, dtype=float)
        self.u_max = np.asarray(self.u_max, dtype=float)
        self.q_eta = np.asarray(self.q_eta, dtype=float)
        self.q_nu = np.asarray(self.q_nu, dtype=float)
        self.r_u = np.asarray(self.r_u, dtype=float)
        if self.mode not in ("docking", "transit"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def rate_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        hi = self.u_max.copy()
        if self.mode == "transit":
            hi[2] = 0.0
        return -hi, hi

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon, "dt": self.dt,
            "a_max": self.a_max.tolist(), "u_max": self.u_max.tolist(),
            "q_eta": self.q_eta.tolist(), "q_nu": self.q_nu.tolist(),
            "r_u": self.r_u.tolist(), "n_st": self.n_st, "mode": self.mode,
            "max_sqp_iter": self.max_sqp_iter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NmpcConfig":
        return cls(**d)


@dataclass
class NmpcStepResult:
    u0: np.ndarray                  # first input (force rates)
    states: np.ndarray              # predicted states (N+1, 9), force actuators
    objective: float
    iterations: int
    solve_time: float
    degraded: bool
    solution: nlp.NlpSolution

    @property
    def actuator_trajectory(self) -> np.ndarray:
        return self.states[:, 6:9]

    @property
    def predicted_positions(self) -> np.ndarray:
        return self.states[:, 0:2]


def quadratic_norm(v, w) -> float:
    """v' diag(w) v (weights enter directly, not inverted)."""
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    if w.ndim == 2:
        return float(v @ w @ v)
    return float(np.sum(w * v * v))


class NmpcController:
    """One controller instance per vessel; step() is called serially."""

    def __init__(self, cfg: NmpcConfig, params: ModelParams):
        self.cfg = cfg
        self.params = params
        self.par = params.vec()
        N = cfg.horizon
        self.nx = 9 * (N + 1)
        self.nu = 3 * N
        self.n = self.nx + self.nu
        self.n_eq = 9 * (N + 1)
        self.eps = model.EPS_SMOOTH
        # power in force space is (|F|/c)^1.5 — a curvature cusp at F = 0;
        # a few-newton width keeps the QP model sane (bias < 1 W)
        self.eps_pow = 2.0
        # stage-cost scaling: power in kW, rate smoothing on bound-normalized
        # rates; raw watts/(N/s)^2 scales swamp the meter-scale tracking
        # terms and the controller would refuse to track
        self.pow_scale = 1e-3
        rate_hi = np.maximum(cfg.rate_bounds()[1], 1e-9)
        self._r_eff = cfg.r_u / rate_hi ** 2
        self._x_hat = np.zeros(9)
        self._tau_d = np.zeros(3)
        self._ref = np.zeros((N + 1, 6))
        self._prev: Optional[nlp.NlpSolution] = None
        # partitioned quasi-Newton blocks for the defect-constraint curvature
        self._qn_blocks = np.zeros((N, 12, 12))
        self._qn_prev = None
        self._qn_cur = None
        self._jac_pattern()
        rows = []
        cols = []
        for k in range(N):
            idx = self._block_vars(k)
            rows.append(np.repeat(idx, 12))
            cols.append(np.tile(idx, 12))
        self._block_rows = np.concatenate(rows)
        self._block_cols = np.concatenate(cols)
        self._problem = nlp.NlpProblem(
            n=self.n, eval_fc=self._eval_fc, eval_derivs=self._eval_derivs,
            n_eq=self.n_eq, n_ineq=0, lb=self._lb, ub=self._ub, hess=self._hess,
            damp_scale=self._damp_scale(), name="nmpc",
        )
        # merit progress bottoms out near 1e-5 stationarity at this
        # objective scale (double precision); 1e-4 is converged for control
        self._opts = nlp.SolverOptions(max_iter=cfg.max_sqp_iter, levenberg0=1e-4,
                                       tol_stat=1e-4, tol_obj_stall=1e-7,
                                       ls_max=12)

    # -- layout
    def split(self, z):
        N = self.cfg.horizon
        return z[: self.nx].reshape(N + 1, 9), z[self.nx :].reshape(N, 3)

    def join(self, X, U):
        return np.concatenate([X.reshape(-1), U.reshape(-1)])

    def _jac_pattern(self):
        N = self.cfg.horizon
        rows = [np.arange(9)]
        cols = [np.arange(9)]
        for k in range(N):
            r0 = 9 + 9 * k
            rows.append(np.repeat(np.arange(r0, r0 + 9), 12))
            cols.append(np.tile(np.concatenate([
                np.arange(9 * k, 9 * k + 9),
                self.nx + np.arange(3 * k, 3 * k + 3),
            ]), 9))
            rows.append(np.arange(r0, r0 + 9))
            cols.append(np.arange(9 * (k + 1), 9 * (k + 1) + 9))
        self._rows = np.concatenate(rows)
        self._cols = np.concatenate(cols)
        cfg = self.cfg
        lb = np.full(self.n, -np.inf)
        ub = np.full(self.n, np.inf)
        for k in range(N + 1):
            lb[9 * k + 6 : 9 * k + 9] = -cfg.a_max
            ub[9 * k + 6 : 9 * k + 9] = cfg.a_max
        r_lo, r_hi = cfg.rate_bounds()
        lb[self.nx :] = np.tile(r_lo, N)
        ub[self.nx :] = np.tile(r_hi, N)
        self._lb, self._ub = lb, ub

    def _block_vars(self, k: int) -> np.ndarray:
        return np.concatenate([
            np.arange(9 * k, 9 * k + 9),
            self.nx + np.arange(3 * k, 3 * k + 3),
        ])

    def _update_qn_blocks(self, lam) -> None:
        if self._qn_cur is None or self._qn_prev is None or lam.shape[0] != self.n_eq:
            self._qn_prev = self._qn_cur
            return
        z_prev, jets_prev = self._qn_prev
        z_cur, jets_cur = self._qn_cur
        if z_prev is z_cur or not np.any(z_prev != z_cur):
            return
        lam_def = lam[9:].reshape(-1, 9)
        cap = 100.0
        for k in range(self.cfg.horizon):
            idx = self._block_vars(k)
            s_k = z_cur[idx] - z_prev[idx]
            ss = float(s_k @ s_k)
            if ss <= 1e-24:
                continue
            y_k = -(jets_cur[k] - jets_prev[k]).T @ lam_def[k]
            B = self._qn_blocks[k]
            Bs = B @ s_k
            sBs = float(s_k @ Bs)
            sy = float(s_k @ y_k)
            if sBs > 1e-16 and sy < 0.2 * sBs:
                theta = 0.8 * sBs / (sBs - sy)
                y_k = theta * y_k + (1.0 - theta) * Bs
                sy = float(s_k @ y_k)
            yy = float(y_k @ y_k)
            if sy <= 1e-8 * np.sqrt(ss * yy) or yy / sy > cap:
                continue
            if sBs > 1e-16:
                B -= np.outer(Bs, Bs) / sBs
            B += np.outer(y_k, y_k) / sy
        self._qn_prev = self._qn_cur

    def _damp_scale(self):
        state_rng = np.array([2.0, 2.0, 0.3, 0.5, 0.5, 0.1, 300.0, 0.5, 80.0])
        u_rng = np.maximum(self.cfg.u_max, 1e-3)
        d = np.empty(self.n)
        d[: self.nx] = np.tile(1.0 / state_rng ** 2, self.cfg.horizon + 1)
        d[self.nx :] = np.tile(1.0 / u_rng ** 2, self.cfg.horizon)
        return d

    # -- power in force parameterization (smoothed, with BT inflow factor)
    def _power_terms(self, X):
        p = self.params
        f_at = X[:-1, 6]
        f_bt = X[:-1, 8]
        u_sur = np.clip(X[:-1, 3], -6.0, 6.0)
        s_at = np.sqrt(f_at ** 2 + self.eps_pow ** 2)
        s_bt = np.sqrt(f_bt ** 2 + self.eps_pow ** 2)
        e_bt = np.exp(1.5 * p.d_bt * u_sur ** 2)
        p_at = self.pow_scale * p.beta_at * (s_at / p.c_at) ** 1.5
        p_bt = self.pow_scale * p.beta_bt * (s_bt / p.c_bt) ** 1.5 * e_bt
        return p_at, p_bt, s_at, s_bt, e_bt

    def stage_power(self, X) -> np.ndarray:
        p_at, p_bt, *_ = self._power_terms(X)
        return p_at + p_bt

    def _tracking_cost(self, X) -> float:
        cfg = self.cfg
        d_eta = X[:, 0:3] - self._ref[:, 0:3]
        d_nu = X[:, 3:6] - self._ref[:, 3:6]
        return float(np.sum(d_eta ** 2 @ cfg.q_eta) + np.sum(d_nu ** 2 @ cfg.q_nu))

    def _eval_fc(self, z):
        cfg = self.cfg
        X, U = self.split(z)
        shot = K.k_shoot_nmpc(
            np.ascontiguousarray(X), np.ascontiguousarray(U), self._tau_d,
            self.par, cfg.dt, cfg.n_st, self.eps, False,
        )
        ce = np.concatenate([
            X[0] - self._x_hat,
            (X[1:] - shot[:, :, 0]).reshape(-1),
        ])
        obj = (
            float(np.sum(self.stage_power(X)))
            + self._tracking_cost(X)
            + float(np.sum(U ** 2 @ self._r_eff))
        )
        return obj, ce, None

    def _eval_derivs(self, z):
        cfg = self.cfg
        X, U = self.split(z)
        shot = K.k_shoot_nmpc(
            np.ascontiguousarray(X), np.ascontiguousarray(U), self._tau_d,
            self.par, cfg.dt, cfg.n_st, self.eps, True,
        )
        self._qn_cur = (z.copy(), shot[:, :, 1:13].copy())
        N = cfg.horizon
        vals = [np.ones(9)]
        for k in range(N):
            vals.append(-shot[k][:, 1:13].reshape(-1))
            vals.append(np.ones(9))
        je = sp.coo_matrix(
            (np.concatenate(vals), (self._rows, self._cols)),
            shape=(self.n_eq, self.n),
        ).tocsr()

        g = np.zeros(self.n)
        d_eta = X[:, 0:3] - self._ref[:, 0:3]
        d_nu = X[:, 3:6] - self._ref[:, 3:6]
        gx = np.zeros((N + 1, 9))
        gx[:, 0:3] = 2.0 * d_eta * cfg.q_eta
        gx[:, 3:6] = 2.0 * d_nu * cfg.q_nu
        p = self.params
        p_at, p_bt, s_at, s_bt, e_bt = self._power_terms(X)
        f_at = X[:-1, 6]
        f_bt = X[:-1, 8]
        u_sur = X[:-1, 3]
        gx[:-1, 6] += 1.5 * p_at / s_at * (f_at / s_at)
        gx[:-1, 8] += 1.5 * p_bt / s_bt * (f_bt / s_bt)
        gx[:-1, 3] += p_bt * 3.0 * p.d_bt * u_sur
        g[: self.nx] = gx.reshape(-1)
        g[self.nx :] = (2.0 * U * self._r_eff).reshape(-1)
        return g, je, None

    def _hess(self, z, lam):
        cfg = self.cfg
        X, U = self.split(z)
        N = cfg.horizon
        d = np.zeros(self.n)
        hx = np.zeros((N + 1, 9))
        hx[:, 0:3] = 2.0 * cfg.q_eta
        hx[:, 3:6] = 2.0 * cfg.q_nu
        p = self.params
        p_at, p_bt, s_at, s_bt, e_bt = self._power_terms(X)
        f_at = X[:-1, 6]
        f_bt = X[:-1, 8]
        u_sur = X[:-1, 3]
        # curvature of the smoothed power terms (diagonal part)
        hx[:-1, 6] += 1.5 * p_at / s_at ** 2 * (1.0 - 0.5 * (f_at / s_at) ** 2)
        hx[:-1, 8] += 1.5 * p_bt / s_bt ** 2 * (1.0 - 0.5 * (f_bt / s_bt) ** 2)
        hx[:-1, 3] += p_bt * 3.0 * p.d_bt * (1.0 + 3.0 * p.d_bt * u_sur ** 2)
        d[: self.nx] = hx.reshape(-1)
        d[self.nx :] = np.tile(2.0 * self._r_eff, N)
        self._update_qn_blocks(lam)
        blocks = sp.coo_matrix(
            (self._qn_blocks.reshape(-1), (self._block_rows, self._block_cols)),
            shape=(self.n, self.n),
        )
        return (sp.diags(d) + blocks).tocsc()

    # -- public API
    def step(self, x_hat, tau_d_hat, ref, warm: Optional[NmpcStepResult] = None) -> NmpcStepResult:
        """One NMPC step.

        x_hat: 9-state estimate with rate-space actuators (plant convention);
        ref: (N+1, 6) pose+velocity window; tau_d_hat held constant over the
        horizon. Returns the first input and the predicted trajectory.
        """
        cfg = self.cfg
        x_hat = np.asarray(x_hat, dtype=float)
        if not np.all(np.isfinite(x_hat)):
            raise ValueError("non-finite state estimate")
        ref = np.asarray(ref, dtype=float)
        if ref.shape != (cfg.horizon + 1, 6):
            raise ValueError(f"reference window must be ({cfg.horizon + 1}, 6)")
        t0 = time.perf_counter()

        x0 = x_hat.copy()
        x0[6:9] = model.rate_to_force_state(x_hat[6:9], x_hat[3:6], self.params)
        x0[6] = np.clip(x0[6], -cfg.a_max[0], cfg.a_max[0])
        x0[8] = np.clip(x0[8], -cfg.a_max[2], cfg.a_max[2])
        self._x_hat = x0
        self._tau_d = np.asarray(tau_d_hat, dtype=float).copy()
        self._ref = ref

        warm_sol = warm.solution if warm is not None else self._prev
        if warm_sol is not None and warm_sol.z.shape[0] == self.n:
            warm_sol = self._shift_solution(warm_sol)
            z0 = warm_sol.z.copy()
            z0[0:9] = x0
            Xw, _ = self.split(z0)
            if not np.all(np.isfinite(z0)) or np.max(np.abs(Xw[:, 3:6])) > 8.0:
                warm_sol = None  # degraded tail: fall back to a cold start
            # slide the curvature blocks with the horizon, forgetting a bit
            self._qn_blocks[:-1] = self._qn_blocks[1:]
            self._qn_blocks *= 0.8
            self._qn_prev = None
            self._qn_cur = None
        else:
            z0 = self.join(np.tile(x0, (cfg.horizon + 1, 1)), np.zeros((cfg.horizon, 3)))
            warm_sol = None
            self._qn_blocks[:] = 0.0
            self._qn_prev = None
            self._qn_cur = None

        sol = nlp.solve(self._problem, z0, self._opts, warm=warm_sol)
        self._prev = sol
        X, U = self.split(sol.z)
        degraded = sol.status not in ("converged", "stalled")
        return NmpcStepResult(
            u0=U[0].copy(), states=X.copy(), objective=sol.obj,
            iterations=sol.iterations, solve_time=time.perf_counter() - t0,
            degraded=degraded, solution=sol,
        )

    def _shift_solution(self, sol: nlp.NlpSolution) -> nlp.NlpSolution:
        """One-interval shift of primal, duals, and QP working set."""
        N = self.cfg.horizon
        X, U = self.split(sol.z.copy())
        X[:-1] = X[1:]
        U[:-1] = U[1:]
        lam = sol.lam_eq.copy()
        if lam.shape[0] == self.n_eq:
            lam_def = lam[9:].reshape(N, 9)
            lam_def[:-1] = lam_def[1:]
            lam = np.concatenate([lam[:9], lam_def.reshape(-1)])
        state = sol.bound_state.copy() if sol.bound_state is not None else None
        if state is not None and state.shape[0] == self.n:
            sx = state[: self.nx].reshape(N + 1, 9)
            sx[:-1] = sx[1:]
            su = state[self.nx :].reshape(N, 3)
            su[:-1] = su[1:]
            state = np.concatenate([sx.reshape(-1), su.reshape(-1)])
        return nlp.NlpSolution(
            z=self.join(X, U), obj=sol.obj, lam_eq=lam, lam_ineq=sol.lam_ineq,
            mult_bounds=sol.mult_bounds, stationarity=sol.stationarity,
            feasibility=sol.feasibility, iterations=sol.iterations,
            status=sol.status, bound_state=state, active_ineq=sol.active_ineq,
        )

    def reset(self) -> None:
        self._prev = None
        self._qn_blocks[:] = 0.0
        self._qn_prev = None
        self._qn_cur = None


def convert_solution_to_actuators(result: NmpcStepResult, x_hat, params: ModelParams,
                                  node: int = 1) -> np.ndarray:
    """Rate-space actuator command from a predicted force-space node.

    Applies the propeller inverses at the current relative velocities."""
    x_hat = np.asarray(x_hat, dtype=float)
    a_force = result.states[node, 6:9]
    return model.force_to_rate_state(a_force, x_hat[3:6], params)


def write_controller_log(path, rows) -> None:
    """Controller log: (t, u0 (3), predicted cost, iters, solve ms, degraded)."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# {NMPC_LOG_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(["t", "u1", "u2", "u3", "cost", "iters", "solve_ms", "degraded"])
        w.writerows(rows)
