"""Adversarial-attack and perturbation-audit toolkit for small image models."""

__version__ = "0.1.0"
