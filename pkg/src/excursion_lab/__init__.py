"""Gaussian excursion-set topology: sampling, functionals and limit-theorem suites."""

__version__ = "0.1.0"
