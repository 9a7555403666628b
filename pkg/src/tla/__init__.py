"""Tiled-array dataflow runtime: scripts compiled to futurized task graphs and run SPMD over localities."""

__version__ = "0.1.0"
