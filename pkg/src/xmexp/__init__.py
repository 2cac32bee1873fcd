"""Attention-entropy regularised graph-attention MARL with post-hoc subgraph explainers."""

__version__ = "0.1.0"
