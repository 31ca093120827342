"""Invertible, physics-guided underwater image enhancement with a detection
feedback loop, on a self-contained numpy autodiff engine."""

__version__ = "0.1.0"
