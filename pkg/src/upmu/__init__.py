"""Micro-synchrophasor analytics for distribution feeders."""

__version__ = "0.1.0"
