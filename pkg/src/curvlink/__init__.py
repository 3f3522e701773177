"""Privacy, memorization and input-loss curvature on small MLPs."""

__version__ = "0.1.0"
