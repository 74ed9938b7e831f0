"""Streaming navigation transformer with latent predictive training, on a toy gridworld."""

__version__ = "0.1.0"
