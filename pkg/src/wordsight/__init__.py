"""Weakly-supervised vision-language pre-training with a dictionary-grounded
feature hallucinator, at desk scale."""

__version__ = "0.1.0"
