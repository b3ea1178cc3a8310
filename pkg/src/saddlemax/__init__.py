"""Saddlepoint-approximate likelihoods and MLEs from cumulant generating functions."""

__version__ = "0.1.0"
