"""Virtual-time collision avoidance.

A governor owns an artificial clock zeta that advances at a rate in [0, 1]
set by the minimal predicted distance to tracked obstacles: full speed
beyond d_safety, frozen below d_col, linear in between. The reference
window handed to the tracking controller is sampled at the retimed
instants, with the velocity sequence scaled by the clock rate (time
dilation), so braking happens along the reference path.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field

import numpy as np

from .planner import ReferenceTrajectory

GOV_LOG_SCHEMA = "watertaxi-govlog-v1"


@dataclass
class ObstacleTrack:
    track_id: int
    position: np.ndarray       # (2,) [m]
    velocity: np.ndarray       # (2,) [m/s], constant-velocity model
    r_track: float             # combined radius offset R = r_ego + r_track [m]

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)
        if self.r_track <= 0.0:
            raise ValueError("R_track must be positive")

    def advance(self, dt: float) -> "ObstacleTrack":
        return ObstacleTrack(self.track_id, self.position + dt * self.velocity,
                             self.velocity.copy(), self.r_track)


@dataclass
class GovernorState:
    d_safety: float = 40.0
    d_col: float = 15.0
    zeta: float = 0.0
    zeta_rate: float = 1.0
    use_reference_prediction: bool = False   # d against the reference window
    last_distance: float = float("inf")
    active_track: int = -1

    def __post_init__(self):
        if not self.d_safety > self.d_col > 0.0:
            raise ValueError("need d_safety > d_col > 0")


def min_predicted_distance(tracks, ego_pred: np.ndarray, dt: float):
    """Minimal circle-to-circle clearance over the prediction instants.

    ego_pred holds N+1 ego positions at instants {0, dt, ..., N dt};
    obstacles advance by their constant velocity. Negative means predicted
    overlap; +inf with no tracks. Returns (distance, blame track id)."""
    ego_pred = np.asarray(ego_pred, dtype=float)
    if not tracks:
        return float("inf"), -1
    steps = dt * np.arange(ego_pred.shape[0])
    best = float("inf")
    blame = -1
    for tr in tracks:
        pos = tr.position[None, :] + steps[:, None] * tr.velocity[None, :]
        d = np.min(np.hypot(*(ego_pred[:, :2] - pos).T) - tr.r_track)
        if d < best:
            best = float(d)
            blame = tr.track_id
    return best, blame


def zeta_rate(d: float, g: GovernorState) -> float:
    """Clock rate in [0, 1]: 0 below d_col, 1 above d_safety, linear between."""
    if d < g.d_col:
        return 0.0
    if d >= g.d_safety:
        return 1.0
    return (d - g.d_col) / (g.d_safety - g.d_col)


def retime_reference(ref: ReferenceTrajectory, g: GovernorState, dt: float, n: int) -> np.ndarray:
    """Reference window of n+1 (pose, velocity) rows at the virtual instants
    zeta + zeta_rate*dt*k; velocities scale with the clock rate."""
    k = np.arange(n + 1)
    tq = g.zeta + g.zeta_rate * dt * k
    pose, vel = ref.interp(tq)
    out = np.empty((n + 1, 6))
    out[:, 0:3] = pose
    out[:, 3:6] = g.zeta_rate * vel
    return out


def governor_step(g: GovernorState, ref: ReferenceTrajectory, tracks,
                  ego_pred: np.ndarray, dt: float, n: int,
                  dt_control: float | None = None, enabled: bool = True) -> np.ndarray:
    """One control-period governor evaluation.

    Computes the predicted clearance, sets the clock rate (forced to 1 when
    disabled — monitoring only), emits the retimed window, then advances
    zeta by rate * dt_control."""
    d, blame = min_predicted_distance(tracks, ego_pred, dt)
    g.last_distance = d
    g.active_track = blame
    g.zeta_rate = zeta_rate(d, g) if enabled else 1.0
    window = retime_reference(ref, g, dt, n)
    g.zeta += g.zeta_rate * (dt if dt_control is None else dt_control)
    return window


def write_governor_log(path, rows) -> None:
    """Governor log: (t, d_min, zeta, zeta_rate, active track id)."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# {GOV_LOG_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(["t", "d_min", "zeta", "zeta_rate", "track_id"])
        w.writerows(rows)
