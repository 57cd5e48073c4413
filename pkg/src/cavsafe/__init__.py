"""Safety-constrained MPC for a connected automated vehicle stopping behind human drivers."""

__version__ = "0.1.0"
