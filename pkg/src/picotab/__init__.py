"""Desk-scale in-context tabular prediction: prior, dual-attention model, serving and tooling."""

__version__ = "0.1.0"
