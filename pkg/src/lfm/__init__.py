"""Tri-level mistake-driven re-weighting for differentiable architecture search."""

__version__ = "0.1.0"
