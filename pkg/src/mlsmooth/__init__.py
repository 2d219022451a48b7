"""Multilevel Monte Carlo fixed-point smoothing for hidden Markov models."""

__version__ = "0.1.0"
