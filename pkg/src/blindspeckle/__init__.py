"""Blind-spot self-supervised despeckling of SAR intensity images."""

__version__ = "0.1.0"
