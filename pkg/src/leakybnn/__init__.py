"""Bayesian neural networks with a Leaky-ReLU slope: MFVI training, calibration and likelihood probes."""

__version__ = "0.1.0"
