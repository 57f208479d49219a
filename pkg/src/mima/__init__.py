"""Multi-indication Bayesian meta-analysis toolkit."""

__version__ = "0.1.0"
__author__ = "Developer"
__email__ = "dev@example.com"
