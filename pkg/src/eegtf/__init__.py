"""Temporal-frequency EEG embeddings with staged low-rank adapter training."""

from .numerics import Parameter, Tensor, finite_diff_check, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "Parameter", "finite_diff_check", "no_grad", "__version__"]
