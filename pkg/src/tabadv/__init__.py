"""Adversarial attacks and adversarial training for tabular fraud detection."""

__version__ = "0.1.0"
