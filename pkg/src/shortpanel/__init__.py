"""Factor analysis and number-of-factors inference for short panels."""

__version__ = "0.1.0"
