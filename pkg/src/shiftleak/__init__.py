"""Federated-learning simulator and passive attack harness for detecting label shifts on other clients."""

__version__ = "0.1.0"
