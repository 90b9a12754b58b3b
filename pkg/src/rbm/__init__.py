"""Paraphrase generation reinforced by a learned matching reward."""

__version__ = "0.1.0"
