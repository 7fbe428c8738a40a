"""Robbins-Monro fluctuations: chains, limiting diffusion and parametrix density expansions."""

__version__ = "0.1.0"
