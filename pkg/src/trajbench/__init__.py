"""Graph-attention vehicle trajectory prediction on a small autodiff engine."""

__version__ = "0.1.0"
