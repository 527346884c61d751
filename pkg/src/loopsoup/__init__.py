"""Monte Carlo laboratory for the three-dimensional Brownian loop soup."""

__version__ = "0.1.0"
