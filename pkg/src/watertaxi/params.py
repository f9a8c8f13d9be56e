"""Vessel model parameters: identified coefficients, geometry, and power gains.

The canonical flat ordering (`ModelParams.vec`) is what the numeric kernels
consume; names and default values follow the identified parameter set of the
8.5 m research vessel. Fixed entries (mass, geometry, propeller gains) are
marked so the identification module can pin them via equal bounds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

# Flat vector layout. Indices are shared with watertaxi.kernels.
P_M = 0
P_XG = 1
P_JCOMB = 2
P_XDU = 3
P_YDV = 4
P_NDV = 5
P_YDR = 6
P_XU = 7
P_YV = 8
P_NV = 9
P_NR = 10
P_YR = 11
P_XUU = 12
P_YVV = 13
P_NVV = 14
P_YRR = 15
P_NRR = 16
P_XRR = 17
P_XVR = 18
P_YUV = 19
P_YUR = 20
P_NUR = 21
P_NUV = 22
P_YAVR = 23
P_YARV = 24
P_NAVR = 25
P_NARV = 26
P_CAT = 27
P_DAT = 28
P_CBT = 29
P_DBT = 30
P_LAT = 31
P_LBT = 32
P_BETA_AT = 33
P_BETA_BT = 34

N_PARAMS = 35
# The identification vector theta covers the model coefficients only
# (power gains are experiment constants, not identified).
N_THETA = 33

_FIELD_ORDER = (
    "m", "x_g", "j_comb",
    "x_du", "y_dv", "n_dv", "y_dr",
    "x_u", "y_v", "n_v", "n_r", "y_r",
    "x_uu", "y_vv", "n_vv", "y_rr", "n_rr",
    "x_rr", "x_vr", "y_uv", "y_ur", "n_ur", "n_uv",
    "y_avr", "y_arv", "n_avr", "n_arv",
    "c_at", "d_at", "c_bt", "d_bt", "l_at", "l_bt",
    "beta_at", "beta_bt",
)

# Entries printed in bold in the identified-parameter table: known beforehand
# and held fixed during identification.
FIXED_NAMES = frozenset({"m", "x_g", "c_at", "c_bt", "l_at", "l_bt"})


@dataclass
class ModelParams:
    """All vessel model parameters in SI units."""

    m: float = 3100.0           # displacement mass [kg]
    x_g: float = 0.0            # longitudinal CG offset [m]
    j_comb: float = 21178.96    # combined rigid-body + added yaw inertia [kg m^2]
    # added mass
    x_du: float = -155.42
    y_dv: float = -1069.97
    n_dv: float = -3328.05
    y_dr: float = -1008.02
    # linear damping
    x_u: float = -84.01
    y_v: float = -795.58
    n_v: float = -958.4
    n_r: float = -5319.88
    y_r: float = -896.11
    # nonlinear damping
    x_uu: float = -46.73        # X_{|u|u}
    y_vv: float = 0.0           # Y_{|v|v}
    n_vv: float = -234.94       # N_{|v|v}
    y_rr: float = -149.37       # Y_{|r|r}
    n_rr: float = 0.0           # N_{|r|r}
    x_rr: float = -312.21       # X_{rr}
    x_vr: float = 434.41
    y_uv: float = 395.03
    y_ur: float = -368.27
    n_ur: float = 392.76
    n_uv: float = -138.5
    y_avr: float = 70.39        # Y_{|v|r}
    y_arv: float = 24.09        # Y_{|r|v}
    n_avr: float = -85.67       # N_{|v|r}
    n_arv: float = 14.09        # N_{|r|v}
    # actuators
    c_at: float = 0.63
    d_at: float = 0.0
    c_bt: float = 0.055
    d_bt: float = 0.62
    l_at: float = 2.9           # azimuth thruster lever arm [m]
    l_bt: float = 3.7           # bow thruster lever arm [m]
    # power model gains [W s^3]
    beta_at: float = 97.6e-3
    beta_bt: float = 6.25e-3

    def vec(self) -> np.ndarray:
        """Flat float64 vector in the canonical kernel ordering."""
        return np.array([getattr(self, name) for name in _FIELD_ORDER], dtype=float)

    @classmethod
    def from_vec(cls, v) -> "ModelParams":
        v = np.asarray(v, dtype=float)
        if v.shape != (N_PARAMS,):
            raise ValueError(f"expected parameter vector of shape ({N_PARAMS},), got {v.shape}")
        return cls(**{name: float(v[i]) for i, name in enumerate(_FIELD_ORDER)})

    def theta(self) -> np.ndarray:
        """Identification vector: the first N_THETA entries of vec()."""
        return self.vec()[:N_THETA]

    def with_theta(self, theta) -> "ModelParams":
        v = self.vec()
        v[:N_THETA] = np.asarray(theta, dtype=float)
        return ModelParams.from_vec(v)

    def mass_matrix(self) -> np.ndarray:
        """3x3 mass matrix M = M_RB + M_A (yaw inertia already combined)."""
        return np.array(
            [
                [self.m - self.x_du, 0.0, 0.0],
                [0.0, self.m - self.y_dv, -self.y_dr],
                [0.0, -self.n_dv, self.j_comb],
            ]
        )

    def validate(self) -> None:
        for name in _FIELD_ORDER:
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite parameter {name}")
        for name in ("c_at", "c_bt", "l_at", "l_bt"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.d_bt < 0.0:
            raise ValueError("d_bt must be non-negative")
        if abs(np.linalg.det(self.mass_matrix())) < 1e-9:
            raise ValueError("mass matrix is singular")

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in _FIELD_ORDER}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown model parameter(s): {sorted(bad)}")
        p = cls(**d)
        p.validate()
        return p

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ModelParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fixed_mask() -> np.ndarray:
    """Boolean mask over theta: True where the entry is fixed by prior knowledge."""
    mask = np.zeros(N_THETA, dtype=bool)
    for i, name in enumerate(_FIELD_ORDER[:N_THETA]):
        if name in FIXED_NAMES:
            mask[i] = True
    return mask


def theta_names() -> list[str]:
    return list(_FIELD_ORDER[:N_THETA])
