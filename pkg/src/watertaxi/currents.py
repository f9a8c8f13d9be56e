"""Analytic current fields with spatial gradients.

Three kinds: ``none``, ``uniform`` (constant drift), and ``river`` (flow
along +x with a parabolic cross-channel profile, peak speed mid-channel and
zero at the banks y = +-half_width). Gradients are analytic, which the
current-field dynamics require.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels as K

_KINDS = {"none": K.FIELD_NONE, "uniform": K.FIELD_UNIFORM, "river": K.FIELD_RIVER}


@dataclass
class CurrentField:
    kind: str = "none"
    vx: float = 0.0            # uniform drift components [m/s]
    vy: float = 0.0
    v_peak: float = 0.0        # river mid-channel speed [m/s]
    half_width: float = 50.0   # river half width [m]

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown current field kind {self.kind!r}")
        if self.kind == "river" and self.half_width <= 0.0:
            raise ValueError("river half_width must be positive")

    def code(self) -> tuple[int, np.ndarray]:
        """(kind code, parameter vector) consumed by the kernels."""
        if self.kind == "uniform":
            fp = np.array([self.vx, self.vy])
        else:
            fp = np.array([self.v_peak, self.half_width])
        return _KINDS[self.kind], fp

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "uniform":
            d.update(vx=self.vx, vy=self.vy)
        elif self.kind == "river":
            d.update(v_peak=self.v_peak, half_width=self.half_width)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CurrentField":
        return cls(**d)

    def scaled(self, magnitude: float) -> "CurrentField":
        """Same geometry with the speed scaled to ``magnitude`` (homotopy)."""
        if self.kind == "none":
            return CurrentField("none")
        if self.kind == "uniform":
            norm = float(np.hypot(self.vx, self.vy))
            if norm == 0.0:
                return CurrentField("none") if magnitude == 0.0 else CurrentField("uniform", vx=magnitude)
            s = magnitude / norm
            return CurrentField("uniform", vx=self.vx * s, vy=self.vy * s)
        return CurrentField("river", v_peak=magnitude, half_width=self.half_width)

    @property
    def magnitude(self) -> float:
        if self.kind == "uniform":
            return float(np.hypot(self.vx, self.vy))
        if self.kind == "river":
            return abs(self.v_peak)
        return 0.0


def current_at(field: CurrentField, position) -> tuple[np.ndarray, np.ndarray]:
    """Current velocity (2,) and spatial gradient (2,2) at a position."""
    pos = np.asarray(position, dtype=float)
    kind, fp = field.code()
    xj = np.array([[pos[0]]])
    yj = np.array([[pos[1]]])
    vel, grad = K.k_current(kind, fp, xj[0], yj[0])
    return vel[:, 0].copy(), grad[:, :, 0].copy()
