"""Temporal artifact diffusion toolkit for localizing manipulated segments
in untrimmed videos."""

__version__ = "0.1.0"
