"""Trajectory-conditioned 4D occupancy generation: tokenizer, diffusion and toy data."""

__version__ = "0.1.0"
