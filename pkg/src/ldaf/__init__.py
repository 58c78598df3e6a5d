"""Stochastic classifiers from linearized assignment flows, with
closed-form expected risk and PAC-Bayes risk certificates."""

from ._backend import active_name as kernel_backend

__all__ = ["kernel_backend"]
__version__ = "0.1.0"
