"""Causal frame-by-frame video editing with residual-flow diffusion."""

__version__ = "0.1.0"
