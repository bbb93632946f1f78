"""Desk-scale laboratory for positional information in vision-language transformers."""

__version__ = "0.1.0"
