"""MAP and Bayes tests for a signal hidden in one of many Gaussian channels."""

__version__ = "0.1.0"
