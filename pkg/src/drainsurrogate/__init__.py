"""Autoregressive neural surrogates of urban drainage hydraulics."""

__version__ = "0.1.0"
