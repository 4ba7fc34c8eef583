"""Bayesian-optimization inverse reinforcement learning on tabular MDPs."""
