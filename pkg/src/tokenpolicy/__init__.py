"""Masked-token sampling with a learned, state-adaptive decoding policy."""

__version__ = "0.1.0"
