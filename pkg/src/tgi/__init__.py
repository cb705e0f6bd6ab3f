"""Temporal ghost imaging with twin photons: simulation and reconstruction."""
