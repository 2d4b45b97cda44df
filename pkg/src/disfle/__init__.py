"""Disease-free life expectancy from hospital-discharge cohorts."""

__version__ = "0.1.0"
