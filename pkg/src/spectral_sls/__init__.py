"""Constrained controller synthesis for an integral-operator evolution equation."""

__version__ = "0.1.0"
