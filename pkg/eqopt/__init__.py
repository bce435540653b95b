"""Parametric IIR equalizer design for multi-source acoustic scenes."""

__version__ = "0.1.0"
