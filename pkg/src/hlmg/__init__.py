"""Hierarchical graph language model on numpy: graph generation, text
serialization, a from-scratch autodiff engine, the two-block model,
training, and interpretability tools."""

__version__ = "0.1.0"
