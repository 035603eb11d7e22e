"""Trajectory-conditioned manipulation success prediction."""

__version__ = "0.1.0"
