"""Federated independent Q-learning on a mixed-autonomy figure-eight lane."""

__version__ = "0.1.0"
