"""Structured output prediction over combinatorial output spaces."""

__version__ = "0.1.0"
