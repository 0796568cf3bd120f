"""Transferable adversarial examples from a Bayesian substitute model."""

__version__ = "0.1.0"
