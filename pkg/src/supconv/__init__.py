"""Explicit feedforward constructions with Sobolev-norm error measurement."""

__version__ = "0.1.0"
