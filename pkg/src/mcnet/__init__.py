"""Crowd density level classification with a compact CNN built on numpy."""

__version__ = "0.1.0"
