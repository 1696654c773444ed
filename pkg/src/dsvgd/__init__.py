"""Distributed Stein variational gradient descent for federated Bayesian learning."""

__version__ = "0.1.0"
