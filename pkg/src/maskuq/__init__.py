"""Uncertainty-aware time-frequency masking for speech enhancement."""

__version__ = "0.1.0"
