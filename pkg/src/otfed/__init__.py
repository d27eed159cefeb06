"""Multi-source domain adaptation by class-regularized optimal transport,
simulated accuracy-weighted federation, and nonparametric rank statistics."""

__version__ = "0.1.0"
