"""Segment-level self-supervised audio representation learning with an EMA teacher."""

__version__ = "0.1.0"
