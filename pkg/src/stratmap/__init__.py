"""Strategy-map exploration for self-improving agents."""

__version__ = "0.1.0"
