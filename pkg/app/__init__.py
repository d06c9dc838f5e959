"""Gaussian-copula multiple imputation toolkit."""

__version__ = "1.0.0"
