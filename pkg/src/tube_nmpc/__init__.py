"""Tube-based robust NMPC toolkit for anaerobic co-digestion."""

from .kernels import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
