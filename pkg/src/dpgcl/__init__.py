"""Differentially private contrastive learning with group-level contribution bounding."""

__version__ = "0.1.0"
