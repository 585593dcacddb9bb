"""Decentralized, timing-based location verification."""

__version__ = "0.1.0"
