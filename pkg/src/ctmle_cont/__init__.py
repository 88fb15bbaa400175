"""Collaborative targeted estimation of the average treatment effect over LASSO propensity paths."""

__version__ = "0.1.0"
