"""Model-inversion privacy risk assessment."""

__version__ = "0.1.0"
