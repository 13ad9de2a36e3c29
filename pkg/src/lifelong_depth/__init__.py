"""Lifelong monocular depth estimation with a shared encoder and per-domain heads, on numpy."""

__version__ = "0.1.0"
