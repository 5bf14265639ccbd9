"""Desk-scale multilingual NMT with a selective language-specific pool."""

__version__ = "0.1.0"
