"""Multi-shot body pose recovery on synthetic data."""

__version__ = "0.1.0"
