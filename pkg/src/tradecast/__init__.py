"""Temporal link prediction for evolving trade networks.

A variational graph encoder per yearly snapshot, a GRU + momentum
structural memory aggregator over sliding windows, and a sequential
model-based hyperparameter search, built on a small reverse-mode
autodiff tape.
"""

__version__ = "0.1.0"
