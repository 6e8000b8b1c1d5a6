"""Conditional adversarial synthesis of subject-specific aged brain slices."""

__version__ = "0.1.0"
