"""Adversarial preference optimisation of a toy vision-language encoder."""

__version__ = "0.1.0"
