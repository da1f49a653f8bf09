"""Masked video diffusion with a jointly trained recognition head, at toy scale."""

__version__ = "0.1.0"
