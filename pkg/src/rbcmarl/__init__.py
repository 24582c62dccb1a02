"""Multi-agent reinforcement learning control of 2D Rayleigh-Benard convection."""

__version__ = "0.1.0"
