"""Causal-graph transformer block with sparse experts, intervention losses and an annealing gate."""

__version__ = "0.1.0"
