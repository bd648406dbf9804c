"""Simulation and fluid-limit toolkit for speed-aware load balancing."""

__version__ = "0.1.0"
