"""Grouped mixture-of-experts transformer with cross-layer expert sharing and pre-gated routing."""

__version__ = "0.1.0"
