"""Desk-scale lab comparing CLS-tuning and prompt-tuning heads on long-tailed data."""

__version__ = "0.1.0"
