"""Drift-cornering simulation with GP residual correction and active
exploration of cornering speeds."""

__version__ = "0.1.0"
