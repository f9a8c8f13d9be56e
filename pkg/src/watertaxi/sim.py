"""Closed-loop simulation harness.

Plant (current-field model, exact modulus forms, 10 RK4 substeps per
control interval), sensor noise, communication delay, UKF estimation,
collision-avoidance governor, and the tracking NMPC — wired in the loop:

    sense -> estimate -> govern/retime -> control -> delay -> actuate

Scenario files are JSON (with include support); the three canned
experiments reproduce the published setups: plain docking, docking across
a river current, and the river crossing with two scripted obstacles.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional

import numpy as np

from . import colav
from . import estimator as est
from . import kernels as K
from . import model
from . import nmpc
from .currents import CurrentField
from .params import ModelParams
from .planner import PlanScenario, ReferenceTrajectory, solve_homotopy

RUNLOG_SCHEMA = "watertaxi-runlog-v1"
SUMMARY_SCHEMA = "watertaxi-summary-v1"


@dataclass
class ObstacleSpec:
    track_id: int
    spawn_time: float
    position: tuple[float, float]
    velocity: tuple[float, float]
    r_track: float

    def to_dict(self):
        return {
            "track_id": self.track_id, "spawn_time": self.spawn_time,
            "position": list(self.position), "velocity": list(self.velocity),
            "r_track": self.r_track,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["track_id"], d["spawn_time"], tuple(d["position"]),
                   tuple(d["velocity"]), d["r_track"])


@dataclass
class Scenario:
    name: str = "scenario"
    plan: Optional[PlanScenario] = None
    nmpc_cfg: nmpc.NmpcConfig = dc_field(default_factory=nmpc.NmpcConfig)
    d_safety: float = 40.0
    d_col: float = 15.0
    obstacles: list[ObstacleSpec] = dc_field(default_factory=list)
    noise_pos: float = 0.02
    noise_yaw: float = 0.005
    noise_vel: float = 0.01
    delay_steps: int = 1
    duration_cap: float = 300.0
    settle_time: float = 2.0
    seed: int = 1
    colav_enabled: bool = True
    capture_radius: float = 0.5

    def params(self) -> ModelParams:
        return self.plan.params if self.plan is not None else ModelParams()

    def field(self) -> CurrentField:
        return self.plan.field if self.plan is not None else CurrentField()

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "nmpc": self.nmpc_cfg.to_dict(),
            "governor": {"d_safety": self.d_safety, "d_col": self.d_col},
            "obstacles": [o.to_dict() for o in self.obstacles],
            "noise": {"pos": self.noise_pos, "yaw": self.noise_yaw, "vel": self.noise_vel},
            "delay_steps": self.delay_steps,
            "duration_cap": self.duration_cap,
            "settle_time": self.settle_time,
            "seed": self.seed,
            "colav_enabled": self.colav_enabled,
            "capture_radius": self.capture_radius,
        }
        if self.plan is not None:
            d["plan"] = {
                "x0": self.plan.x0.tolist(),
                "x_target": self.plan.x_target.tolist(),
                "t_max": self.plan.t_max,
                "beta": self.plan.beta,
                "n_plan": self.plan.n_plan,
                "field": self.plan.field.to_dict(),
                "model_params": self.plan.params.to_dict(),
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        plan = None
        if "plan" in d:
            pd = d["plan"]
            plan = PlanScenario(
                np.asarray(pd["x0"], dtype=float),
                np.asarray(pd["x_target"], dtype=float),
                pd["t_max"], pd.get("beta", 0.0),
                CurrentField.from_dict(pd.get("field", {"kind": "none"})),
                pd.get("n_plan", 180),
                ModelParams.from_dict(pd.get("model_params", {})),
            )
        gov = d.get("governor", {})
        noise = d.get("noise", {})
        return cls(
            name=d.get("name", "scenario"),
            plan=plan,
            nmpc_cfg=nmpc.NmpcConfig.from_dict(d["nmpc"]) if "nmpc" in d else nmpc.NmpcConfig(),
            d_safety=gov.get("d_safety", 40.0),
            d_col=gov.get("d_col", 15.0),
            obstacles=[ObstacleSpec.from_dict(o) for o in d.get("obstacles", [])],
            noise_pos=noise.get("pos", 0.02),
            noise_yaw=noise.get("yaw", 0.005),
            noise_vel=noise.get("vel", 0.01),
            delay_steps=d.get("delay_steps", 1),
            duration_cap=d.get("duration_cap", 300.0),
            settle_time=d.get("settle_time", 2.0),
            seed=d.get("seed", 1),
            colav_enabled=d.get("colav_enabled", True),
            capture_radius=d.get("capture_radius", 0.5),
        )


def load_config(path) -> dict:
    """JSON scenario with an optional 'include' (path or list, merged first)."""
    path = Path(path)
    raw = json.loads(path.read_text())
    includes = raw.pop("include", [])
    if isinstance(includes, str):
        includes = [includes]
    merged: dict = {}
    for inc in includes:
        sub = load_config(path.parent / inc)
        _deep_merge(merged, sub)
    _deep_merge(merged, raw)
    return merged


def _deep_merge(base: dict, extra: dict) -> None:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_merge(base[k], v)
        else:
            base[k] = v


@dataclass
class RunLog:
    times: np.ndarray
    truth: np.ndarray           # (T, 9)
    estimate: np.ndarray        # (T, 12)
    command: np.ndarray         # (T, 3) rate-space actuator setpoint
    governor: np.ndarray        # (T, 4): d_min, zeta, zeta_rate, track id
    obstacles: np.ndarray       # (T, 2*n_obs), inactive -> nan
    power: np.ndarray           # (T,)
    solve_ms: np.ndarray        # (T,)
    solve_iters: np.ndarray     # (T,)
    degraded: np.ndarray        # (T,) bool
    min_separation: np.ndarray  # (T,) actual center distance minus R, min over tracks
    energy: float
    captured_at: float          # first time within capture radius (inf if never)

    def save(self, path) -> None:
        n_obs = self.obstacles.shape[1] // 2
        cols = (
            ["t"]
            + [f"x{i}" for i in range(9)]
            + [f"est{i}" for i in range(12)]
            + ["cmd_nat", "cmd_alpha", "cmd_nbt"]
            + ["d_min", "zeta", "zeta_rate", "track_id"]
            + [f"obs{i}_{c}" for i in range(n_obs) for c in ("x", "y")]
            + ["power_w", "solve_ms", "solve_iters", "degraded", "min_sep"]
        )
        with open(path, "w", newline="") as fh:
            fh.write(f"# {RUNLOG_SCHEMA}\n")
            w = csv.writer(fh)
            w.writerow(cols)
            for i in range(self.times.shape[0]):
                row = (
                    [f"{self.times[i]:.3f}"]
                    + [f"{v:.9g}" for v in self.truth[i]]
                    + [f"{v:.9g}" for v in self.estimate[i]]
                    + [f"{v:.9g}" for v in self.command[i]]
                    + [f"{v:.9g}" for v in self.governor[i]]
                    + [f"{v:.9g}" for v in self.obstacles[i]]
                    + [f"{self.power[i]:.9g}", f"{self.solve_ms[i]:.3f}",
                       f"{int(self.solve_iters[i])}", f"{int(self.degraded[i])}",
                       f"{self.min_separation[i]:.9g}"]
                )
                w.writerow(row)

    @classmethod
    def load(cls, path) -> "RunLog":
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0].strip() != f"# {RUNLOG_SCHEMA}":
            raise ValueError(f"{path}: missing schema line '# {RUNLOG_SCHEMA}'")
        rows = list(csv.reader(lines[1:]))
        header = rows[0]
        data = np.array(rows[1:], dtype=float)
        n_obs = sum(1 for h in header if h.endswith("_x")) or (
            sum(1 for h in header if h.startswith("obs") and h.endswith("x")))
        i = header.index
        obs_cols = [j for j, h in enumerate(header) if h.startswith("obs")]
        power = data[:, i("power_w")]
        dt = data[1, 0] - data[0, 0] if data.shape[0] > 1 else 0.25
        log = cls(
            times=data[:, 0],
            truth=data[:, 1:10],
            estimate=data[:, 10:22],
            command=data[:, 22:25],
            governor=data[:, 25:29],
            obstacles=data[:, obs_cols] if obs_cols else np.zeros((data.shape[0], 0)),
            power=power,
            solve_ms=data[:, i("solve_ms")],
            solve_iters=data[:, i("solve_iters")],
            degraded=data[:, i("degraded")].astype(bool),
            min_separation=data[:, i("min_sep")],
            energy=float(np.sum(power) * dt),
            captured_at=float("inf"),
        )
        return log


@dataclass
class Metrics:
    energy: float               # [J]
    accuracy: float             # max distance to reference path [m]
    duration: float             # first capture time [s], inf if never
    solve_fraction: float       # max solve time / dt
    captured: bool
    min_separation: float       # min over run of center distance minus R
    min_predicted_distance: float

    def row(self) -> list:
        return [self.energy, self.accuracy, self.duration, self.solve_fraction,
                int(self.captured), self.min_separation, self.min_predicted_distance]


def point_polyline_distance(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Distance from each point to a polyline (min over segments)."""
    points = np.atleast_2d(points)
    a = poly[:-1]
    b = poly[1:]
    ab = b - a
    denom = np.maximum(np.sum(ab * ab, axis=1), 1e-300)
    out = np.empty(points.shape[0])
    for i, pt in enumerate(points):
        ap = pt[None, :] - a
        t = np.clip(np.sum(ap * ab, axis=1) / denom, 0.0, 1.0)
        proj = a + t[:, None] * ab
        out[i] = np.min(np.hypot(*(pt[None, :] - proj).T))
    return out


def evaluate_metrics(log: RunLog, ref: ReferenceTrajectory, dock) -> Metrics:
    """Published metric set: energy, max path deviation, capture time, CPU."""
    if log.times.shape[0] == 0:
        raise ValueError("empty run log")
    dock = np.asarray(dock, dtype=float)[:2]
    dt = log.times[1] - log.times[0] if log.times.shape[0] > 1 else 0.25
    acc = float(np.max(point_polyline_distance(log.truth[:, 0:2], ref.poses[:, 0:2])))
    dist_dock = np.hypot(log.truth[:, 0] - dock[0], log.truth[:, 1] - dock[1])
    captured = bool(np.any(dist_dock < 0.5))
    duration = float(log.times[np.argmax(dist_dock < 0.5)]) if captured else float("inf")
    return Metrics(
        energy=log.energy,
        accuracy=acc,
        duration=duration,
        solve_fraction=float(np.max(log.solve_ms) / (1e3 * dt)),
        captured=captured,
        min_separation=float(np.min(log.min_separation)),
        min_predicted_distance=float(np.min(log.governor[:, 0])),
    )


def run_closed_loop(scen: Scenario, ref: Optional[ReferenceTrajectory] = None,
                    progress: bool = False) -> RunLog:
    """Simulate the full stack on a scenario. Deterministic for a given seed
    (wall-clock solve times excluded)."""
    if scen.plan is None:
        raise ValueError("scenario has no plan section")
    params = scen.params()
    par = params.vec()
    field = scen.field()
    kind, fp = field.code()
    cfg = scen.nmpc_cfg
    dt = cfg.dt
    rng = np.random.default_rng(scen.seed)

    if ref is None:
        ref = solve_homotopy(scen.plan)

    # plant state: relative velocities, rate-space actuators
    x_true = scen.plan.x0.copy()
    ctl = nmpc.NmpcController(cfg, params)
    ukf = est.Ukf(params, dt=dt)
    meas_cov = np.diag([
        scen.noise_pos ** 2 + 1e-12, scen.noise_pos ** 2 + 1e-12,
        scen.noise_yaw ** 2 + 1e-12,
        scen.noise_vel ** 2 + 1e-12, scen.noise_vel ** 2 + 1e-12,
        scen.noise_vel ** 2 + 1e-12,
    ])
    belief = est.Belief.initial(x_true)
    gov = colav.GovernorState(d_safety=scen.d_safety, d_col=scen.d_col)

    # communication delay: queue of rate-space actuator setpoints
    cmd_queue = [x_true[6:9].copy() for _ in range(max(scen.delay_steps, 0))]

    n_obs = len(scen.obstacles)
    n_max = int(np.ceil(scen.duration_cap / dt)) + 1
    T = np.zeros(n_max)
    truth = np.zeros((n_max, 9))
    estimate = np.zeros((n_max, 12))
    command = np.zeros((n_max, 3))
    governor = np.zeros((n_max, 4))
    obstacles = np.full((n_max, 2 * n_obs), np.nan)
    power = np.zeros(n_max)
    solve_ms = np.zeros(n_max)
    solve_it = np.zeros(n_max)
    degraded = np.zeros(n_max, dtype=bool)
    min_sep = np.full(n_max, np.inf)

    result: Optional[nmpc.NmpcStepResult] = None
    u_applied = np.zeros(3)
    energy = 0.0
    captured_at = float("inf")
    k = 0
    t = 0.0
    ref_done_margin = scen.settle_time

    while t < scen.duration_cap:
        # current obstacle set
        tracks = []
        for ob in scen.obstacles:
            if t >= ob.spawn_time:
                age = t - ob.spawn_time
                pos = np.asarray(ob.position) + age * np.asarray(ob.velocity)
                tracks.append(colav.ObstacleTrack(ob.track_id, pos,
                                                  np.asarray(ob.velocity), ob.r_track))
                sep = float(np.hypot(*(x_true[:2] - pos)) - ob.r_track)
                min_sep[k] = min(min_sep[k], sep)
                obstacles[k, 2 * (ob.track_id - 1): 2 * ob.track_id] = pos

        # sense: pose (wrapped yaw) + velocity, with noise
        y_eta = x_true[0:3] + rng.normal(0.0, [scen.noise_pos, scen.noise_pos, scen.noise_yaw])
        # measurements are of absolute body velocity (local model state)
        nu_abs = x_true[3:6].copy()
        if kind != K.FIELD_NONE:
            velj, _ = K.k_current(kind, fp, np.array([x_true[0]]), np.array([x_true[1]]))
            c, s = np.cos(x_true[2]), np.sin(x_true[2])
            nu_abs[0] += c * velj[0, 0] + s * velj[1, 0]
            nu_abs[1] += -s * velj[0, 0] + c * velj[1, 0]
        y_nu = nu_abs + rng.normal(0.0, scen.noise_vel, 3)
        y_eta[2] = model.wrap_angle(y_eta[2])
        meas = est.Measurement(y_eta, y_nu, meas_cov)

        if k > 0:
            belief = ukf.predict(belief, u_applied, dt)
        belief = ukf.update(belief, meas)
        x_hat = belief.state.copy()
        # actuator state is driven by known commands; trust the belief rows
        tau_hat = belief.tau_d.copy()

        # governor: predicted ego positions from the previous NMPC solve
        if result is not None:
            ego_pred = np.vstack([result.predicted_positions[1:],
                                  result.predicted_positions[-1:]])
        else:
            pose0, _ = ref.interp(gov.zeta + dt * np.arange(cfg.horizon + 1))
            ego_pred = pose0[:, 0:2]
        window = colav.governor_step(
            gov, ref, tracks, ego_pred, dt, cfg.horizon,
            enabled=scen.colav_enabled,
        )
        governor[k] = [gov.last_distance, gov.zeta, gov.zeta_rate, gov.active_track]

        result = ctl.step(x_hat, tau_hat, window, warm=result)
        a_cmd = nmpc.convert_solution_to_actuators(result, x_hat, params)

        # command reaches the plant after the configured delay
        cmd_queue.append(a_cmd)
        act_cmd = cmd_queue.pop(0)
        u_plant = (act_cmd - x_true[6:9]) / dt
        u_applied = u_plant

        T[k] = t
        truth[k] = x_true
        estimate[k] = belief.mean
        command[k] = act_cmd
        p_now = float(model.power(x_true[6], x_true[8], params))
        power[k] = p_now
        solve_ms[k] = 1e3 * result.solve_time
        solve_it[k] = result.iterations
        degraded[k] = result.degraded

        # plant integration at 10 substeps, exact modulus forms
        x_true = K.k_plant_step(x_true, u_plant, np.zeros(3), par, kind, fp, dt, 10)
        energy += p_now * dt

        d_dock = float(np.hypot(x_true[0] - scen.plan.x_target[0],
                                x_true[1] - scen.plan.x_target[1]))
        t += dt
        k += 1
        if d_dock < scen.capture_radius and not np.isfinite(captured_at):
            captured_at = t
        if np.any(~np.isfinite(x_true)) or np.max(np.abs(x_true[3:6])) > 20.0:
            raise RuntimeError(f"plant diverged at t={t:.2f}s: {x_true}")
        if (np.isfinite(captured_at) and gov.zeta >= ref.duration
                and t >= captured_at + ref_done_margin):
            break
        if progress and k % 100 == 0:
            print(f"  t={t:.0f}s dock={d_dock:.1f}m zeta={gov.zeta:.0f}")

    sl = slice(0, k)
    return RunLog(
        times=T[sl], truth=truth[sl], estimate=estimate[sl], command=command[sl],
        governor=governor[sl], obstacles=obstacles[sl], power=power[sl],
        solve_ms=solve_ms[sl], solve_iters=solve_it[sl], degraded=degraded[sl],
        min_separation=min_sep[sl], energy=energy, captured_at=captured_at,
    )


# -- canned experiments -------------------------------------------------------

def experiment_scenario(which: int, seed: int = 1, n_plan: int = 180,
                        colav_enabled: bool = True) -> Scenario:
    """The three published experiment setups as canned scenarios."""
    if which == 1:
        plan = PlanScenario(
            x0=np.array([-50.0, 0, 0, 0, 0, 0, 0, 0, 0]),
            x_target=np.array([0.0, 50.0, np.pi / 2, 0, 0, 0, 0, 0, 0]),
            t_max=80.0, beta=0.0, field=CurrentField("none"), n_plan=n_plan,
        )
        return Scenario(name="ex1", plan=plan, duration_cap=120.0, seed=seed,
                        colav_enabled=colav_enabled)
    river = CurrentField("river", v_peak=0.7, half_width=50.0)
    plan = PlanScenario(
        x0=np.array([0.0, -50.0, np.pi / 2, 0, 0, 0, 0, 0, 0]),
        x_target=np.array([0.0, 50.0, np.pi / 2, 0, 0, 0, 0, 0, 0]),
        t_max=120.0, beta=0.0, field=river, n_plan=n_plan,
    )
    if which == 2:
        return Scenario(name="ex2", plan=plan, duration_cap=180.0, seed=seed,
                        colav_enabled=colav_enabled)
    if which == 3:
        obstacles = [
            # ferry along the river; forces the initial wait
            ObstacleSpec(1, 0.0, (-110.0, -20.0), (3.0, 0.0), 25.0),
            # rowboat against the river near the goal bank; forces a brake
            ObstacleSpec(2, 0.0, (330.0, 35.0), (-2.0, 0.0), 10.0),
        ]
        return Scenario(name="ex3", plan=plan, obstacles=obstacles,
                        duration_cap=300.0, seed=seed, colav_enabled=colav_enabled)
    raise ValueError("experiment index must be 1, 2, or 3")


def write_summary(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {SUMMARY_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(["run", "energy_kj", "accuracy_m", "duration_s", "cpu_frac",
                    "captured", "min_sep_m", "min_pred_dist_m"])
        w.writerows(rows)
