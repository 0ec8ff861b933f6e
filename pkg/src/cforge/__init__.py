"""Batch engine for building, filtering, and probing counterfactual face datasets."""

__version__ = "0.1.0"
