"""Unscented Kalman filter with an augmented constant-disturbance state.

The belief covers the 12-dimensional vector (pose, velocity, actuator
state, lumped disturbance force); the disturbance rows have random-walk
dynamics so slowly varying external effects remain trackable. Prediction
propagates scaled sigma points through the local vessel dynamics with each
point's own disturbance as input; the update corrects with the pose and
velocity measurement, wrapping the yaw innovation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import kernels as K
from .model import wrap_angle
from .params import ModelParams

EST_LOG_SCHEMA = "watertaxi-estlog-v1"

NAUG = 12
# Mahalanobis-squared gate for the 6-dim innovation (chi^2, 97th pct)
INNOVATION_GATE = 13.8


@dataclass
class Measurement:
    eta: np.ndarray          # measured pose (yaw may be wrapped)
    nu: np.ndarray           # measured body velocity
    cov: np.ndarray = dc_field(default_factory=lambda: default_measurement_cov())

    def vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.eta, dtype=float),
                               np.asarray(self.nu, dtype=float)])


def default_measurement_cov() -> np.ndarray:
    """RTK-GPS/IMU grade channel variances."""
    return np.diag([0.02 ** 2, 0.02 ** 2, 0.005 ** 2, 0.01 ** 2, 0.01 ** 2, 0.005 ** 2])


def default_process_noise(dt: float) -> np.ndarray:
    q = np.concatenate([
        np.full(3, 1e-6),
        np.full(3, 1e-4),
        np.full(3, 1e-6),
        np.full(3, 25.0 * dt),  # disturbance random walk [N^2 per step]
    ])
    return np.diag(q)


@dataclass
class Belief:
    mean: np.ndarray         # (12,) = (eta, nu, a, tau_d)
    cov: np.ndarray          # (12, 12) SPD

    @classmethod
    def initial(cls, x0, p0_diag=None) -> "Belief":
        mean = np.zeros(NAUG)
        mean[:9] = np.asarray(x0, dtype=float)
        if p0_diag is None:
            p0_diag = np.concatenate([
                np.full(3, 0.05 ** 2), np.full(3, 0.02 ** 2),
                np.full(3, 1e-6), np.full(3, 100.0),
            ])
        return cls(mean, np.diag(np.asarray(p0_diag, dtype=float)))

    @property
    def state(self) -> np.ndarray:
        return self.mean[:9]

    @property
    def tau_d(self) -> np.ndarray:
        return self.mean[9:12]


class Ukf:
    """Scaled-form UKF (alpha=0.1, beta=2, kappa=0) over the local model."""

    def __init__(self, params: ModelParams, dt: float = 0.25,
                 alpha: float = 0.1, beta: float = 2.0, kappa: float = 0.0,
                 process_noise: np.ndarray | None = None, n_sub: int = 2):
        self.params = params
        self.par = params.vec()
        self.dt = dt
        self.n_sub = n_sub
        self.q = process_noise if process_noise is not None else default_process_noise(dt)
        n = NAUG
        lam = alpha ** 2 * (n + kappa) - n
        self._gamma = np.sqrt(n + lam)
        self.wm = np.full(2 * n + 1, 1.0 / (2.0 * (n + lam)))
        self.wc = self.wm.copy()
        self.wm[0] = lam / (n + lam)
        self.wc[0] = lam / (n + lam) + (1.0 - alpha ** 2 + beta)
        self.repair_events = 0
        self.gated_count = 0

    # -- internals
    def _sigma_points(self, b: Belief) -> np.ndarray:
        try:
            s = np.linalg.cholesky(b.cov)
        except np.linalg.LinAlgError:
            s = np.linalg.cholesky(self._repair(b.cov))
        pts = np.empty((2 * NAUG + 1, NAUG))
        pts[0] = b.mean
        for i in range(NAUG):
            col = self._gamma * s[:, i]
            pts[1 + i] = b.mean + col
            pts[1 + NAUG + i] = b.mean - col
        return pts

    def _repair(self, cov: np.ndarray, floor: float = 1e-12) -> np.ndarray:
        self.repair_events += 1
        w, v = np.linalg.eigh(0.5 * (cov + cov.T))
        return (v * np.maximum(w, floor)) @ v.T

    def _propagate(self, point: np.ndarray, u_applied: np.ndarray, dt: float) -> np.ndarray:
        out = point.copy()
        xj = K.const_jets(np.ascontiguousarray(point[:9]), 0)
        uj = K.const_jets(np.ascontiguousarray(u_applied), 0)
        tj = K.const_jets(np.ascontiguousarray(point[9:12]), 0)
        parj = K.const_jets(self.par, 0)
        one = K.jcon(1.0, 0)
        res = K.k_rk4(K.MODE_LOCAL, xj, uj, tj, parj, K.FIELD_NONE, np.zeros(2),
                      one, dt, self.n_sub, 0.0)
        out[:9] = res[:, 0]
        return out

    # -- public API
    def predict(self, b: Belief, u_applied, dt: float | None = None) -> Belief:
        """Unscented propagation through the local dynamics; the disturbance
        rows propagate identically (random-walk noise added afterwards)."""
        dt = self.dt if dt is None else dt
        if dt <= 0.0:
            raise ValueError("dt must be positive")
        u_applied = np.asarray(u_applied, dtype=float)
        pts = self._sigma_points(b)
        prop = np.empty_like(pts)
        for i in range(pts.shape[0]):
            prop[i] = self._propagate(pts[i], u_applied, dt)
        mean = self.wm @ prop
        diff = prop - mean
        cov = (self.wc[:, None] * diff).T @ diff + self.q
        cov = 0.5 * (cov + cov.T)
        if np.linalg.eigvalsh(cov)[0] <= 0.0:
            cov = self._repair(cov)
        return Belief(mean, cov)

    def update(self, b: Belief, y: Measurement) -> Belief:
        """Measurement update on (eta, nu); yaw innovation wrapped to (-pi, pi].

        Measurements beyond the Mahalanobis gate are rejected (belief
        returned unchanged, event counted)."""
        yv = y.vector()
        if not np.all(np.isfinite(yv)):
            raise ValueError("non-finite measurement")
        pts = self._sigma_points(b)
        zs = pts[:, :6]
        z_mean = self.wm @ zs
        dz = zs - z_mean
        s_cov = (self.wc[:, None] * dz).T @ dz + y.cov
        dx = pts - b.mean
        cross = (self.wc[:, None] * dx).T @ dz
        innov = yv - z_mean
        innov[2] = wrap_angle(innov[2])
        m2 = float(innov @ np.linalg.solve(s_cov, innov))
        if m2 > INNOVATION_GATE:
            self.gated_count += 1
            return Belief(b.mean.copy(), b.cov.copy())
        gain = cross @ np.linalg.inv(s_cov)
        mean = b.mean + gain @ innov
        cov = b.cov - gain @ s_cov @ gain.T
        cov = 0.5 * (cov + cov.T)
        if np.linalg.eigvalsh(cov)[0] <= 0.0:
            cov = self._repair(cov)
        return Belief(mean, cov)


def innovation_norm(b_pred: Belief, y: Measurement) -> float:
    z = b_pred.mean[:6].copy()
    innov = y.vector() - z
    innov[2] = wrap_angle(innov[2])
    return float(np.linalg.norm(innov))


def write_estimator_log(path, rows) -> None:
    """Estimator log: (t, mean(12), trace(P), innovation norm, gated flag)."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# {EST_LOG_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(["t"] + [f"m{i}" for i in range(12)] + ["traceP", "innov", "gated"])
        w.writerows(rows)
