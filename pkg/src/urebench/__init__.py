"""Robustness and attribution workbench for residual classifiers on
spectrograms of synthetic device emissions."""

__version__ = "0.1.0"
