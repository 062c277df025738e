"""Deployment-time evolution runtime: versioned artifact state, solve/evolve loop, governed commits."""

__version__ = "0.1.0"
