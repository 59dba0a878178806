"""Particle simulation of kernelized Fisher-Rao gradient flows on weighted ensembles."""

__version__ = "0.1.0"
