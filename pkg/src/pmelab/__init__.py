"""Numerical laboratory for intrinsic-scaling estimates of the porous medium equation."""
from __future__ import annotations

__version__ = "0.1.0"
