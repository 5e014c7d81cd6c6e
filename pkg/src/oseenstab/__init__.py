"""Boundary and collar feedback stabilization of discrete Oseen and Navier-Stokes flows."""

__version__ = "0.1.0"
