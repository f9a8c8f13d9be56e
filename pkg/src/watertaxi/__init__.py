"""Autonomous water-taxi planning, estimation, control, and avoidance stack."""

__version__ = "0.1.0"

from .params import ModelParams

__all__ = ["ModelParams", "__version__"]
