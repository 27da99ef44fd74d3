"""Unsupervised adversarial domain adaptation for cross-lingual emotion classification."""

__version__ = "0.1.0"
