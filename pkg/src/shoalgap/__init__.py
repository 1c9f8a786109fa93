"""Simulation benchmark for fish behavior models probed by learned guidance policies."""

__version__ = "0.1.0"
