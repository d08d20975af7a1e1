"""Slide-level colorectal diagnosis: tiling, severity-ranked MIL, review service."""

__version__ = "0.1.0"
