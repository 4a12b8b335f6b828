"""Residual learning of minimum-energy point-to-point robot trajectories."""

__version__ = "0.1.0"
