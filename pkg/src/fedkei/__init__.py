"""Deterministic simulator of federated continual learning with
knowledge-enhanced initializations for adapter tuning."""

__version__ = "0.1.0"
