"""Exogenous state discovery and removal for reinforcement learning."""

__version__ = "0.1.0"
