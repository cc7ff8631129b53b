"""Bayesian uncertainty propagation for node classification."""
