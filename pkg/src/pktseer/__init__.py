"""Packet next-step prediction and intrusion classification with small transformers."""

__version__ = "0.1.0"
