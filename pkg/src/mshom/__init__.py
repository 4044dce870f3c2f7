"""Multiscale homogenization solvers for Maxwell-Schrodinger systems with periodic media."""

__version__ = "0.1.0"
