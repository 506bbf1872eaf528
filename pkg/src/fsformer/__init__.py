"""Federated, differentially private transformer lab for V2X misbehavior detection."""

__version__ = "0.1.0"
