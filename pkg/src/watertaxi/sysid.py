"""Output-error parameter identification from maneuver sequences.

Each recorded sequence holds equidistant pose/velocity measurements and the
actuator states that drove them. Simulation anchors at the first
measurement (full state measured, so the decision vector stays the
parameter vector regardless of the number of sequences), propagates the
local model under the recorded actuators, and the weighted output residual
plus a quadratic prior is minimized under sign/box constraints with a
Gauss-Newton SQP.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import kernels as K
from . import nlp
from .params import (ModelParams, N_THETA, N_PARAMS, fixed_mask, theta_names)

SEQ_HEADER = ["t", "x_l", "y_l", "psi", "u", "v", "r", "n_AT", "alpha", "n_BT"]


class SimulationDiverged(RuntimeError):
    def __init__(self, seq_index: int, step: int):
        super().__init__(f"simulation diverged in sequence {seq_index} at step {step}")
        self.seq_index = seq_index
        self.step = step


@dataclass
class Sequence:
    t0: float
    dt: float
    y: np.ndarray        # (K, 6) pose + velocity
    a: np.ndarray        # (K, 3) actuator states

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.a = np.asarray(self.a, dtype=float)
        if self.y.ndim != 2 or self.y.shape[1] != 6 or self.y.shape[0] < 2:
            raise ValueError("sequence needs K >= 2 rows of 6 measured states")
        if self.a.shape != (self.y.shape[0], 3):
            raise ValueError("actuator record must match the measurement count")
        if self.dt <= 0 or not np.all(np.isfinite(self.y)) or not np.all(np.isfinite(self.a)):
            raise ValueError("sequence must be finite with positive sampling period")

    @property
    def K(self) -> int:
        return self.y.shape[0]

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SEQ_HEADER)
            for k in range(self.K):
                w.writerow([f"{self.t0 + k * self.dt:.6f}"]
                           + [f"{v:.9g}" for v in self.y[k]]
                           + [f"{v:.9g}" for v in self.a[k]])

    @classmethod
    def load(cls, path) -> "Sequence":
        rows = list(csv.reader(Path(path).read_text().splitlines()))
        if rows[0] != SEQ_HEADER:
            raise ValueError(f"{path}: expected header {','.join(SEQ_HEADER)}")
        data = np.array(rows[1:], dtype=float)
        dt = data[1, 0] - data[0, 0]
        return cls(t0=float(data[0, 0]), dt=float(dt), y=data[:, 1:7], a=data[:, 7:10])


def load_sequences(directory) -> list[Sequence]:
    return [Sequence.load(p) for p in sorted(Path(directory).glob("*.csv"))]


@dataclass
class IdentSpec:
    theta0: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    s_cov: np.ndarray
    rho_weight: float = 1e-4
    n_sub: int = 2

    @classmethod
    def default(cls, free_names=None) -> "IdentSpec":
        """Bounds encode the sign priors; bold (known) entries are pinned.

        free_names restricts the free set further (anything else pinned)."""
        theta0 = ModelParams().theta()
        lb = np.full(N_THETA, -np.inf)
        ub = np.full(N_THETA, np.inf)
        names = theta_names()
        for i, name in enumerate(names):
            v = theta0[i]
            if name in ("d_at", "d_bt", "j_comb"):
                lb[i] = 0.0
            elif v > 0:
                lb[i] = 0.0
            elif v < 0:
                ub[i] = 0.0
            elif name in ("y_vv", "n_rr"):
                ub[i] = 0.0  # pure modulus damping resists motion
        fixed = fixed_mask()
        if free_names is not None:
            keep = set(free_names)
            unknown = keep - set(names)
            if unknown:
                raise ValueError(f"unknown parameter names: {sorted(unknown)}")
            for i, name in enumerate(names):
                if name not in keep:
                    fixed[i] = True
        lb[fixed] = theta0[fixed]
        ub[fixed] = theta0[fixed]
        s = np.diag([0.05 ** 2, 0.05 ** 2, 0.01 ** 2, 0.02 ** 2, 0.02 ** 2, 0.005 ** 2])
        return cls(theta0=theta0, lb=lb, ub=ub, s_cov=s)

    def free_indices(self) -> np.ndarray:
        return np.flatnonzero(self.lb != self.ub)

    def to_dict(self) -> dict:
        return {
            "theta0": self.theta0.tolist(), "lb": self.lb.tolist(),
            "ub": self.ub.tolist(), "s_cov": np.diag(self.s_cov).tolist(),
            "rho_weight": self.rho_weight, "n_sub": self.n_sub,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IdentSpec":
        return cls(
            theta0=np.asarray(d["theta0"], dtype=float),
            lb=np.asarray(d["lb"], dtype=float),
            ub=np.asarray(d["ub"], dtype=float),
            s_cov=np.diag(np.asarray(d["s_cov"], dtype=float)),
            rho_weight=d.get("rho_weight", 1e-4),
            n_sub=d.get("n_sub", 2),
        )


def _theta_to_par(theta) -> np.ndarray:
    par = ModelParams().vec()
    par[:N_THETA] = theta
    return par


def simulate_sequence(theta, seq: Sequence, n_sub: int = 2,
                      seq_index: int = 0) -> np.ndarray:
    """Predicted measurements: anchored at y_1, driven by the recorded
    actuator states (zero-order hold)."""
    par = _theta_to_par(np.asarray(theta, dtype=float))
    parj = K.const_jets(par, 0)
    out = K.k_sysid_sim(np.ascontiguousarray(seq.y[0]),
                        np.ascontiguousarray(seq.a), parj, seq.dt, n_sub, 0.0)
    y_hat = out[:, :, 0]
    bad = ~np.isfinite(y_hat) | (np.abs(y_hat) > 1e6)
    if np.any(bad):
        raise SimulationDiverged(seq_index, int(np.argmax(np.any(bad.reshape(seq.K, -1), axis=1))))
    return y_hat


def _prior_scale(theta0: np.ndarray) -> np.ndarray:
    return np.maximum(np.abs(theta0), 1.0)


def oe_objective(theta, data: list[Sequence], spec: IdentSpec) -> float:
    """Sum of S-weighted squared output errors plus the quadratic prior.

    Sequence contributions are accumulated with compensated addition, so
    concurrent per-sequence evaluation would be order-independent."""
    theta = np.asarray(theta, dtype=float)
    s_inv = np.linalg.inv(spec.s_cov)
    total = 0.0
    comp = 0.0
    for i, seq in enumerate(data):
        y_hat = simulate_sequence(theta, seq, spec.n_sub, seq_index=i)
        r = y_hat - seq.y
        val = float(np.sum((r @ s_inv) * r))
        t = total + val
        if abs(total) >= abs(val):
            comp += (total - t) + val
        else:
            comp += (val - t) + total
        total = t
    scale = _prior_scale(spec.theta0)
    d = (theta - spec.theta0) / scale
    return total + comp + spec.rho_weight * float(d @ d)


@dataclass
class IdentResult:
    params: ModelParams
    theta: np.ndarray
    rmse: list[float]
    objective: float
    status: str
    iterations: int

    def table(self) -> str:
        names = theta_names()
        fixed = fixed_mask()
        lines = ["identified parameters (SI units):"]
        for i, name in enumerate(names):
            tag = " (fixed)" if fixed[i] else ""
            lines.append(f"  {name:>8s} = {self.theta[i]:12.4f}{tag}")
        lines.append("per-sequence RMSE: " + ", ".join(f"{r:.4g}" for r in self.rmse))
        return "\n".join(lines)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        with open(out / "report.csv", "w", newline="") as fh:
            fh.write("# watertaxi-ident-v1\n")
            w = csv.writer(fh)
            w.writerow(["name", "value", "fixed"])
            fixed = fixed_mask()
            for i, name in enumerate(theta_names()):
                w.writerow([name, f"{self.theta[i]:.9g}", int(fixed[i])])
            w.writerow(["objective", f"{self.objective:.9g}", ""])
            for i, r in enumerate(self.rmse):
                w.writerow([f"rmse_seq{i}", f"{r:.9g}", ""])
        (out / "table.txt").write_text(self.table() + "\n")


def identify(data: list[Sequence], spec: IdentSpec | None = None,
             opts: nlp.SolverOptions | None = None) -> IdentResult:
    """Box-constrained Gauss-Newton output-error fit."""
    if not data:
        raise ValueError("need at least one sequence")
    spec = spec or IdentSpec.default()
    s_inv = np.linalg.inv(spec.s_cov)
    scale = _prior_scale(spec.theta0)
    w_prior = spec.rho_weight / scale ** 2
    cache: dict = {}

    def _sim_jets(theta):
        key = theta.tobytes()
        if cache.get("key") == key:
            return cache["out"]
        par = _theta_to_par(theta)
        parj = np.zeros((N_PARAMS, 1 + N_THETA))
        parj[:, 0] = par
        for i in range(N_THETA):
            parj[i, 1 + i] = 1.0
        outs = []
        for i, seq in enumerate(data):
            out = K.k_sysid_sim(np.ascontiguousarray(seq.y[0]),
                                np.ascontiguousarray(seq.a), parj, seq.dt,
                                spec.n_sub, 0.0)
            if not np.all(np.isfinite(out[:, :, 0])) or np.max(np.abs(out[:, :, 0])) > 1e6:
                raise SimulationDiverged(i, -1)
            outs.append(out)
        cache.clear()
        cache["key"] = key
        cache["out"] = outs
        return outs

    def eval_fc(theta):
        return oe_objective(theta, data, spec), None, None

    def eval_derivs(theta):
        outs = _sim_jets(np.asarray(theta, dtype=float))
        g = 2.0 * w_prior * (theta - spec.theta0)
        gn = 2.0 * np.diag(w_prior)
        for out, seq in zip(outs, data):
            r = out[:, :, 0] - seq.y                    # (K, 6)
            J = out[:, :, 1:]                           # (K, 6, 33)
            rw = r @ s_inv                              # (K, 6)
            g = g + 2.0 * np.einsum("kc,kcj->j", rw, J)
            Jw = np.einsum("cd,kdj->kcj", s_inv, J)
            gn = gn + 2.0 * np.einsum("kci,kcj->ij", J, Jw)
        eval_derivs.last_gn = gn
        return g, None, None

    eval_derivs.last_gn = 2.0 * np.diag(w_prior)

    problem = nlp.NlpProblem(
        n=N_THETA, eval_fc=eval_fc, eval_derivs=eval_derivs,
        n_eq=0, n_ineq=0, lb=spec.lb, ub=spec.ub,
        hess=lambda z, lam: eval_derivs.last_gn,
        damp_scale=1.0 / scale ** 2,
        name="identify",
    )
    opts = opts or nlp.SolverOptions(max_iter=200, tol_stat=1e-6)
    sol = nlp.solve(problem, spec.theta0, opts)
    theta = sol.z
    rmse = []
    for i, seq in enumerate(data):
        y_hat = simulate_sequence(theta, seq, spec.n_sub, seq_index=i)
        rmse.append(float(np.sqrt(np.mean((y_hat - seq.y) ** 2))))
    params = ModelParams().with_theta(theta)
    return IdentResult(params=params, theta=theta, rmse=rmse,
                       objective=sol.obj, status=sol.status,
                       iterations=sol.iterations)


# -- synthetic benchmark ------------------------------------------------------

BENCH_FREE = ("x_u", "x_uu", "y_v", "n_r", "d_bt")


def benchmark_sequences(params: ModelParams | None = None, dt: float = 0.5,
                        duration: float = 60.0, n_sub: int = 2,
                        noise_pos: float = 0.0, noise_vel: float = 0.0,
                        noise_yaw: float | None = None,
                        seed: int = 0) -> list[Sequence]:
    """Six informative maneuvers simulated from the given parameters.

    The generator uses the same discrete-time map as the identification
    model, so with zero noise the fit residual at the true parameters is
    exactly the prior term."""
    params = params or ModelParams()
    theta = params.theta()
    rng = np.random.default_rng(seed)
    kk = int(duration / dt) + 1
    t = dt * np.arange(kk)
    n_at_c, n_bt_c = 20.0, 40.0

    def sq(period):
        return np.sign(np.sin(2 * np.pi * t / period) + 1e-12)

    maneuvers = []
    # zig-zag
    a = np.zeros((kk, 3))
    a[:, 0] = n_at_c
    a[:, 1] = np.deg2rad(25.0) * sq(24.0)
    maneuvers.append(a)
    # turning circle
    a = np.zeros((kk, 3))
    a[:, 0] = n_at_c
    a[:, 1] = -np.deg2rad(20.0)
    maneuvers.append(a)
    # accelerate then stop
    a = np.zeros((kk, 3))
    a[:, 0] = np.where(t < duration / 2, n_at_c, 0.0)
    maneuvers.append(a)
    # reverse
    a = np.zeros((kk, 3))
    a[:, 0] = -0.6 * n_at_c
    maneuvers.append(a)
    # bow-thruster twist
    a = np.zeros((kk, 3))
    a[:, 0] = 6.0
    a[:, 2] = n_bt_c * sq(20.0)
    maneuvers.append(a)
    # combined excitation
    a = np.zeros((kk, 3))
    a[:, 0] = n_at_c * (0.6 + 0.4 * np.sin(2 * np.pi * t / 30.0))
    a[:, 1] = np.deg2rad(15.0) * np.sin(2 * np.pi * t / 17.0)
    a[:, 2] = 0.5 * n_bt_c * np.cos(2 * np.pi * t / 13.0)
    maneuvers.append(a)

    if noise_yaw is None:
        noise_yaw = 0.01 if noise_pos > 0 else 0.0
    sigma = np.array([noise_pos, noise_pos, noise_yaw,
                      noise_vel, noise_vel, 0.005 if noise_vel > 0 else 0.0])
    seqs = []
    for a in maneuvers:
        seq0 = Sequence(t0=0.0, dt=dt, y=np.zeros((kk, 6)), a=a)
        y = simulate_sequence(theta, seq0, n_sub)
        y = y + rng.normal(0.0, 1.0, y.shape) * sigma
        seqs.append(Sequence(t0=0.0, dt=dt, y=y, a=a))
    return seqs
