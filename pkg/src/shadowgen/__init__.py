"""Generative transformer for classical-shadow data of spin-chain ground states."""

__version__ = "0.1.0"
