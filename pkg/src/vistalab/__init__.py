"""Desk-scale lab for transferring text-SAE interpretability to visual tokens."""

__version__ = "0.1.0"
