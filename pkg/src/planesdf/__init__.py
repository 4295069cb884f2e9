"""Neural SDF scene reconstruction regularized by unsupervised pseudo-planes."""

__version__ = "0.1.0"
