"""Certified-robust training with misclassification-aware regularization."""

__version__ = "0.1.0"
