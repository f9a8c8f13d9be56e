"""Energy/time-optimal docking trajectory optimization.

Direct multiple shooting of the free-final-time OCP: the duration T is a
decision variable scaling the dynamics on a fixed unit time grid. The
objective beta*T + (1-beta)*energy trades duration against propulsion
energy. Current fields are introduced by homotopy continuation (ramping the
magnitude, warm-starting each stage), and a Pareto sweep walks the beta
grid reusing neighboring solutions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import kernels as K
from . import model
from . import nlp
from .currents import CurrentField, current_at
from .params import ModelParams

TRAJ_SCHEMA = "watertaxi-traj-v1"
_KJ = 1e-3  # objective works in kJ so default tolerances are meaningful


class PlannerError(RuntimeError):
    pass


class HomotopyStepFailed(PlannerError):
    def __init__(self, msg: str, last_converged: float):
        super().__init__(msg)
        self.last_converged = last_converged


@dataclass
class PlanScenario:
    x0: np.ndarray
    x_target: np.ndarray
    t_max: float
    beta: float = 0.0
    field: CurrentField = dc_field(default_factory=CurrentField)
    n_plan: int = 180
    params: ModelParams = dc_field(default_factory=ModelParams)
    t_min: float = 1.0
    n_sub: int = 1

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.x_target = np.asarray(self.x_target, dtype=float)
        if self.x0.shape != (9,) or self.x_target.shape != (9,):
            raise ValueError("boundary states must be 9-dimensional")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.t_max <= 0.0:
            raise ValueError("t_max must be positive")

    def with_field(self, fld: CurrentField) -> "PlanScenario":
        return PlanScenario(self.x0, self.x_target, self.t_max, self.beta, fld,
                            self.n_plan, self.params, self.t_min, self.n_sub)

    def with_beta(self, beta: float) -> "PlanScenario":
        return PlanScenario(self.x0, self.x_target, self.t_max, beta, self.field,
                            self.n_plan, self.params, self.t_min, self.n_sub)


@dataclass
class ReferenceTrajectory:
    """Planner output: node states on a uniform grid over [0, T].

    Velocities are stored body-fixed absolute (relative + current), which is
    what the tracking controller consumes.
    """

    duration: float
    times: np.ndarray          # (N+1,)
    poses: np.ndarray          # (N+1, 3)
    velocities: np.ndarray     # (N+1, 3) absolute
    actuators: np.ndarray      # (N+1, 3) rate space
    inputs: np.ndarray         # (N, 3)
    energy: float              # [J]

    def interp(self, t):
        """Linear interpolation of (pose, velocity) with terminal hold."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        tc = np.clip(t, 0.0, self.duration)
        pose = np.stack([np.interp(tc, self.times, self.poses[:, i]) for i in range(3)], axis=-1)
        vel = np.stack([np.interp(tc, self.times, self.velocities[:, i]) for i in range(3)], axis=-1)
        return pose, vel

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# {TRAJ_SCHEMA}\n")
            w = csv.writer(fh)
            w.writerow(["t", "x_l", "y_l", "psi", "u", "v", "r",
                        "n_AT", "alpha", "n_BT", "u1", "u2", "u3"])
            n = len(self.times)
            for k in range(n):
                u_row = self.inputs[k] if k < n - 1 else np.zeros(3)
                w.writerow(
                    [f"{self.times[k]:.6f}"]
                    + [f"{v:.9g}" for v in self.poses[k]]
                    + [f"{v:.9g}" for v in self.velocities[k]]
                    + [f"{v:.9g}" for v in self.actuators[k]]
                    + [f"{v:.9g}" for v in u_row]
                )

    @classmethod
    def load(cls, path) -> "ReferenceTrajectory":
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0].strip() != f"# {TRAJ_SCHEMA}":
            raise ValueError(f"{path}: missing schema line '# {TRAJ_SCHEMA}'")
        rows = list(csv.reader(lines[1:]))
        data = np.array(rows[1:], dtype=float)
        times = data[:, 0]
        return cls(
            duration=float(times[-1]),
            times=times,
            poses=data[:, 1:4],
            velocities=data[:, 4:7],
            actuators=data[:, 7:10],
            inputs=data[:-1, 10:13],
            energy=float("nan"),
        )


def node_power(actuators: np.ndarray, params: ModelParams, eps: float = 0.0) -> np.ndarray:
    """Propulsion power per node from rate-space actuator columns."""
    n_at = np.sqrt(actuators[..., 0] ** 2 + eps * eps)
    n_bt = np.sqrt(actuators[..., 2] ** 2 + eps * eps)
    return params.beta_at * n_at ** 3 + params.beta_bt * n_bt ** 3


class _OcpBuilder:
    """Multiple-shooting transcription of the free-final-time OCP."""

    def __init__(self, scen: PlanScenario):
        self.scen = scen
        n_nodes = scen.n_plan + 1
        self.nx = 9 * n_nodes
        self.nu = 3 * scen.n_plan
        self.n = self.nx + self.nu + 1
        self.it_idx = self.n - 1
        self.n_eq = 9 * (scen.n_plan + 2)
        self.par = scen.params.vec()
        self.kind, self.fp = scen.field.code()
        self.h = 1.0 / scen.n_plan
        self.eps = model.EPS_SMOOTH
        self._build_pattern()
        # partitioned quasi-Newton state for the defect Lagrangian curvature:
        # one 13x13 block per interval over (x_k, u_k, T)
        self._qn_blocks = np.zeros((scen.n_plan, 13, 13))
        self._qn_prev: Optional[tuple[np.ndarray, np.ndarray]] = None  # (z, jets)
        self._qn_cur: Optional[tuple[np.ndarray, np.ndarray]] = None
        self._block_rows, self._block_cols = self._block_pattern()

    # -- layout helpers
    def split(self, z):
        N = self.scen.n_plan
        X = z[: self.nx].reshape(N + 1, 9)
        U = z[self.nx : self.nx + self.nu].reshape(N, 3)
        T = z[self.it_idx]
        return X, U, T

    def join(self, X, U, T) -> np.ndarray:
        return np.concatenate([X.reshape(-1), U.reshape(-1), [T]])

    def _build_pattern(self):
        N = self.scen.n_plan
        rows = [np.arange(9)]
        cols = [np.arange(9)]
        for k in range(N):
            r0 = 9 + 9 * k
            rr = np.repeat(np.arange(r0, r0 + 9), 13)
            cc = np.tile(
                np.concatenate([
                    np.arange(9 * k, 9 * k + 9),
                    self.nx + np.arange(3 * k, 3 * k + 3),
                    [self.it_idx],
                ]),
                9,
            )
            rows.append(rr)
            cols.append(cc)
            rows.append(np.arange(r0, r0 + 9))
            cols.append(np.arange(9 * (k + 1), 9 * (k + 1) + 9))
        r0 = 9 + 9 * N
        rows.append(np.arange(r0, r0 + 9))
        cols.append(np.arange(9 * N, 9 * N + 9))
        self._rows = np.concatenate(rows)
        self._cols = np.concatenate(cols)

    def _block_vars(self, k: int) -> np.ndarray:
        return np.concatenate([
            np.arange(9 * k, 9 * k + 9),
            self.nx + np.arange(3 * k, 3 * k + 3),
            [self.it_idx],
        ])

    def _block_pattern(self):
        rows = []
        cols = []
        for k in range(self.scen.n_plan):
            idx = self._block_vars(k)
            rows.append(np.repeat(idx, 13))
            cols.append(np.tile(idx, 13))
        return np.concatenate(rows), np.concatenate(cols)

    # -- NLP callbacks
    def eval_fc(self, z):
        X, U, T = self.split(z)
        shot = K.k_shoot_plan(
            np.ascontiguousarray(X), np.ascontiguousarray(U), float(T),
            self.par, self.kind, self.fp, self.h, self.scen.n_sub, self.eps, False,
        )
        defects = X[1:] - shot[:, :, 0]
        ce = np.concatenate([
            X[0] - self.scen.x0,
            defects.reshape(-1),
            X[-1] - self.scen.x_target,
        ])
        return self.objective(X, U, T), ce, None

    def objective(self, X, U, T) -> float:
        s = self.scen
        p_sm = node_power(X[:-1, 6:9], s.params, self.eps)
        energy = (T / s.n_plan) * float(np.sum(p_sm))
        return s.beta * T + (1.0 - s.beta) * energy * _KJ

    def eval_derivs(self, z):
        X, U, T = self.split(z)
        s = self.scen
        shot = K.k_shoot_plan(
            np.ascontiguousarray(X), np.ascontiguousarray(U), float(T),
            self.par, self.kind, self.fp, self.h, s.n_sub, self.eps, True,
        )
        self._qn_cur = (z.copy(), shot[:, :, 1:14].copy())
        N = s.n_plan
        vals = [np.ones(9)]
        for k in range(N):
            vals.append(-shot[k][:, 1:14].reshape(-1))
            vals.append(np.ones(9))
        vals.append(np.ones(9))
        je = sp.coo_matrix(
            (np.concatenate(vals), (self._rows, self._cols)), shape=(self.n_eq, self.n)
        ).tocsr()

        g = np.zeros(self.n)
        scale = (1.0 - s.beta) * (T / N) * _KJ
        a = X[:-1, 6:9]
        s_at = np.sqrt(a[:, 0] ** 2 + self.eps ** 2)
        s_bt = np.sqrt(a[:, 2] ** 2 + self.eps ** 2)
        dp_at = 3.0 * s.params.beta_at * a[:, 0] * s_at
        dp_bt = 3.0 * s.params.beta_bt * a[:, 2] * s_bt
        idx = 9 * np.arange(N)
        g[idx + 6] = scale * dp_at
        g[idx + 8] = scale * dp_bt
        p_sm = node_power(a, s.params, self.eps)
        g[self.it_idx] = s.beta + (1.0 - s.beta) * float(np.sum(p_sm)) / N * _KJ
        return g, je, None

    def hess(self, z, lam):
        X, U, T = self.split(z)
        s = self.scen
        N = s.n_plan
        scale = (1.0 - s.beta) * (T / N) * _KJ
        a = X[:-1, 6:9]
        s_at = np.sqrt(a[:, 0] ** 2 + self.eps ** 2)
        s_bt = np.sqrt(a[:, 2] ** 2 + self.eps ** 2)
        h_at = 3.0 * s.params.beta_at * (s_at + a[:, 0] ** 2 / s_at)
        h_bt = 3.0 * s.params.beta_bt * (s_bt + a[:, 2] ** 2 / s_bt)
        idx = 9 * np.arange(N)
        d = np.zeros(self.n)
        d[idx + 6] = scale * h_at
        d[idx + 8] = scale * h_bt
        self._update_qn_blocks(lam)
        blocks = sp.coo_matrix(
            (self._qn_blocks.reshape(-1), (self._block_rows, self._block_cols)),
            shape=(self.n, self.n),
        )
        return (sp.diags(d) + blocks).tocsc()

    def _update_qn_blocks(self, lam) -> None:
        """Partitioned damped-BFGS estimate of the defect-constraint curvature.

        The Lagrangian splits per interval as lam_k' (x_{k+1} - F_k(x_k,u_k,T));
        its gradient over the block variables is -J_k' lam_k, so consecutive
        derivative evaluations give curvature pairs per block.
        """
        if self._qn_cur is None or self._qn_prev is None or lam.shape[0] != self.n_eq:
            self._qn_prev = self._qn_cur
            return
        z_prev, jets_prev = self._qn_prev
        z_cur, jets_cur = self._qn_cur
        if z_prev is z_cur or not np.any(z_prev != z_cur):
            return
        lam_def = lam[9 : 9 + 9 * self.scen.n_plan].reshape(-1, 9)
        cap = 50.0  # spectral bound per block; constraint curvature is mild
        for k in range(self.scen.n_plan):
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
            # Powell damping toward the current B keeps the block PSD
            if sBs > 1e-16 and sy < 0.2 * sBs:
                theta = 0.8 * sBs / (sBs - sy)
                y_k = theta * y_k + (1.0 - theta) * Bs
                sy = float(s_k @ y_k)
            yy = float(y_k @ y_k)
            # reject noisy pairs and anything that would blow the cap
            if sy <= 1e-8 * np.sqrt(ss * yy) or yy / sy > cap:
                continue
            if sBs > 1e-16:
                B -= np.outer(Bs, Bs) / sBs
            B += np.outer(y_k, y_k) / sy
        self._qn_prev = self._qn_cur

    def bounds(self):
        s = self.scen
        lb = np.full(self.n, -np.inf)
        ub = np.full(self.n, np.inf)
        a_lo, a_hi = model.rate_box(s.params)
        u_lo, u_hi = model.rate_input_box(s.params)
        N = s.n_plan
        for k in range(N + 1):
            lb[9 * k + 6 : 9 * k + 9] = a_lo
            ub[9 * k + 6 : 9 * k + 9] = a_hi
        lb[self.nx : self.nx + self.nu] = np.tile(u_lo, N)
        ub[self.nx : self.nx + self.nu] = np.tile(u_hi, N)
        lb[self.it_idx] = s.t_min
        ub[self.it_idx] = s.t_max
        return lb, ub

    def damp_scale(self) -> np.ndarray:
        """Damping metric 1/range^2 so trust steps respect natural units."""
        s = self.scen
        state_rng = np.array([10.0, 10.0, 0.5, 1.0, 1.0, 0.2, 20.0, 1.0, 30.0])
        _, u_hi = model.rate_input_box(s.params)
        d = np.empty(self.n)
        d[: self.nx] = np.tile(1.0 / state_rng ** 2, s.n_plan + 1)
        d[self.nx : self.nx + self.nu] = np.tile(1.0 / u_hi ** 2, s.n_plan)
        d[self.it_idx] = 1.0 / (0.2 * s.t_max) ** 2
        return d

    def problem(self) -> nlp.NlpProblem:
        lb, ub = self.bounds()
        return nlp.NlpProblem(
            n=self.n, eval_fc=self.eval_fc, eval_derivs=self.eval_derivs,
            n_eq=self.n_eq, n_ineq=0, lb=lb, ub=ub, hess=self.hess,
            damp_scale=self.damp_scale(),
            name=f"plan[{self.scen.field.kind}:{self.scen.field.magnitude:.2f},b={self.scen.beta:.2f}]",
        )

    def initial_guess(self) -> np.ndarray:
        """Straight-line, constant-yaw-rate interpolant with T = t_max / 2."""
        s = self.scen
        N = s.n_plan
        T = s.t_max / 2.0
        tau = np.linspace(0.0, 1.0, N + 1)
        X = np.zeros((N + 1, 9))
        X[:, 0] = s.x0[0] + tau * (s.x_target[0] - s.x0[0])
        X[:, 1] = s.x0[1] + tau * (s.x_target[1] - s.x0[1])
        X[:, 2] = s.x0[2] + tau * (s.x_target[2] - s.x0[2])
        dpos = (s.x_target[:2] - s.x0[:2]) / T
        for k in range(N + 1):
            c, sn = np.cos(X[k, 2]), np.sin(X[k, 2])
            X[k, 3] = c * dpos[0] + sn * dpos[1]
            X[k, 4] = -sn * dpos[0] + c * dpos[1]
        X[:, 5] = (s.x_target[2] - s.x0[2]) / T
        U = np.zeros((N, 3))
        return self.join(X, U, T)

    def to_reference(self, z) -> ReferenceTrajectory:
        X, U, T = self.split(z)
        s = self.scen
        times = np.linspace(0.0, T, s.n_plan + 1)
        vel_abs = X[:, 3:6].copy()
        if s.field.kind != "none":
            for k in range(X.shape[0]):
                vc, _ = current_at(s.field, X[k, :2])
                c, sn = np.cos(X[k, 2]), np.sin(X[k, 2])
                vel_abs[k, 0] += c * vc[0] + sn * vc[1]
                vel_abs[k, 1] += -sn * vc[0] + c * vc[1]
        energy = (T / s.n_plan) * float(np.sum(node_power(X[:-1, 6:9], s.params)))
        return ReferenceTrajectory(
            duration=float(T), times=times, poses=X[:, 0:3].copy(),
            velocities=vel_abs, actuators=X[:, 6:9].copy(), inputs=U.copy(),
            energy=energy,
        )


def build_ocp(scen: PlanScenario) -> nlp.NlpProblem:
    """The discretized OCP as a generic NLP (decision: nodes, inputs, T)."""
    return _OcpBuilder(scen).problem()


def _default_opts() -> nlp.SolverOptions:
    # the stall floor ends the flat-tail grind once feasible and no merit
    # progress is measurable
    return nlp.SolverOptions(max_iter=500, levenberg0=1e-4, tol_obj_stall=1e-9)


def solve_fixed_field(scen: PlanScenario, z0=None, warm=None,
                      opts: nlp.SolverOptions | None = None):
    builder = _OcpBuilder(scen)
    problem = builder.problem()
    if z0 is None:
        z0 = builder.initial_guess()
    sol = nlp.solve(problem, z0, opts or _default_opts(), warm=warm)
    return builder, sol


def solve_homotopy(scen: PlanScenario, opts: nlp.SolverOptions | None = None,
                   return_solution: bool = False):
    """Solve the scenario, ramping the current magnitude in steps <= 0.25 m/s.

    Each continuation stage is warm-started from the previous one; a failed
    stage halves the increment (down to 0.01 m/s) before giving up.
    """
    opts = opts or _default_opts()
    target = scen.field.magnitude
    if target <= 1e-12:
        builder, sol = solve_fixed_field(scen, opts=opts)
        if not sol.success:
            raise HomotopyStepFailed(
                f"planner failed at zero current: {sol.status}", float("nan"))
        return (builder.to_reference(sol.z), sol) if return_solution else builder.to_reference(sol.z)

    builder, sol = solve_fixed_field(scen.with_field(CurrentField("none")), opts=opts)
    if not sol.success:
        raise HomotopyStepFailed("planner failed at zero current", float("nan"))
    reached = 0.0
    step = 0.25
    while reached < target - 1e-12:
        v_next = min(reached + step, target)
        stage = scen.with_field(scen.field.scaled(v_next))
        b2, s2 = solve_fixed_field(stage, z0=sol.z, warm=sol, opts=opts)
        if s2.success:
            builder, sol = b2, s2
            reached = v_next
            continue
        step *= 0.5
        if step < 0.01:
            raise HomotopyStepFailed(
                f"homotopy stalled at current {reached:.3f} m/s (target {target})",
                reached,
            )
    return (builder.to_reference(sol.z), sol) if return_solution else builder.to_reference(sol.z)


@dataclass
class ParetoPoint:
    beta: float
    t_opt: float
    energy: float
    status: str


def pareto_sweep(scen: PlanScenario, betas, opts: nlp.SolverOptions | None = None) -> list[ParetoPoint]:
    """Solve the scenario over an ascending beta grid, chaining warm starts."""
    betas = list(betas)
    if any(b < 0.0 or b > 1.0 for b in betas) or sorted(betas) != betas:
        raise ValueError("beta grid must be ascending within [0, 1]")
    opts = opts or _default_opts()
    out: list[ParetoPoint] = []
    warm_z = None
    warm_sol = None
    for beta in betas:
        sub = scen.with_beta(beta)
        try:
            if warm_z is None:
                traj, sol = solve_homotopy(sub, opts=opts, return_solution=True)
            else:
                builder, sol = solve_fixed_field(sub, z0=warm_z, warm=warm_sol, opts=opts)
                if not sol.success:
                    out.append(ParetoPoint(beta, float("nan"), float("nan"), sol.status))
                    continue
                traj = builder.to_reference(sol.z)
        except HomotopyStepFailed as exc:
            out.append(ParetoPoint(beta, float("nan"), float("nan"), str(exc)))
            continue
        warm_z = sol.z
        warm_sol = sol
        out.append(ParetoPoint(beta, traj.duration, traj.energy, sol.status))
    return out


def resample_reference(traj: ReferenceTrajectory, dt: float):
    """First-order resampling onto a uniform dt grid (terminal hold past T).

    Returns (times, poses, velocities)."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    n = int(np.ceil(traj.duration / dt - 1e-12)) + 1
    times = dt * np.arange(n)
    poses, vels = traj.interp(times)
    return times, poses, vels


def save_pareto(points: list[ParetoPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# watertaxi-pareto-v1\n")
        w = csv.writer(fh)
        w.writerow(["beta", "t_opt", "energy_j", "status"])
        for pt in points:
            w.writerow([f"{pt.beta:.6g}", f"{pt.t_opt:.6g}", f"{pt.energy:.6g}", pt.status])
