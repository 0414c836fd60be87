"""Memory-reinforced identification-feature learning for person search."""

__version__ = "0.1.0"
