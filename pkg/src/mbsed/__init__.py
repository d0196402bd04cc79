"""Multi-branch weakly-supervised sound event detection, desk scale."""

__version__ = "0.1.0"
