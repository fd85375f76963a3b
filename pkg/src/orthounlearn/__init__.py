"""Federated unlearning simulator with orthogonal steepest-descent unlearning."""

__version__ = "0.1.0"
