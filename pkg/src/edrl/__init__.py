"""Essence-point and disentangled representation learning for two-modality classification."""

__version__ = "0.1.0"
