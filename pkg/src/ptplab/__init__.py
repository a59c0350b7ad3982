"""Prompt tuning with perturbation-based regularizers on a miniature transformer."""

__version__ = "0.1.0"
