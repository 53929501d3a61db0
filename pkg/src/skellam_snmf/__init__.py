"""Skellam-based probabilistic semi-nonnegative matrix factorization."""

__version__ = "0.1.0"
