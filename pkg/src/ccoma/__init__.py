"""Communicating counterfactual multi-agent policy gradients on numpy."""

__version__ = "0.1.0"
