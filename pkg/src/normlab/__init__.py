"""Normalization-bias lab: min-norm theory checks and Counterbalancing Teacher training."""

__version__ = "0.1.0"
