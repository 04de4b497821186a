"""Exemplar-based video anomaly detection with a learned Siamese patch distance."""

__version__ = "0.1.0"
