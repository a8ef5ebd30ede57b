"""Gait recognition with counterfactual attention intervention and low-rank
dynamic attention generators, on a deterministic numpy tensor core."""

__version__ = "0.1.0"
