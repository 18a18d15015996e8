"""Backpropagated weight-gradient features from sparse and variational autoencoders."""

__version__ = "0.1.0"
