"""Differentially private self-supervised pre-training on a toy masked-prediction model."""

__version__ = "0.1.0"
