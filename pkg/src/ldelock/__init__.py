"""Analog circuit locking with layout-dependent transistor arrangements."""

__version__ = "0.1.0"
