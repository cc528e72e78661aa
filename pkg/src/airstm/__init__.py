"""Hierarchical spatio-temporal Gaussian models for air-quality data.

Six models (A1, A2, A3-1, A3-2, B, C) share a measurement equation and a
covariate trend and differ in how the detrended residual process is
structured. The package fits them by Metropolis-within-Gibbs, predicts at
unmonitored sites by composition sampling, and compares them on
complexity, cost and validation indexes.
"""

__version__ = "0.1.0"

from .models import ModelKind, ParamState, PriorSpec, model_meta  # noqa: E402

__all__ = ["ModelKind", "ParamState", "PriorSpec", "model_meta", "__version__"]
