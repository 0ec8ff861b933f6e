"""Reference HTTP backend for the counterfactual-pipeline wire protocol."""

__version__ = "0.1.0"
