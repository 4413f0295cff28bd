"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .synthscene import Sample, validate_sample


def check_dataset(samples, config=None, validate=True):
    """List of :class:`Sample` with grids and widths consistent with ``config``."""
    if isinstance(samples, Sample):
        samples = [samples]
    samples = list(samples)
    if not samples:
        raise ValueError("dataset is empty")
    for i, s in enumerate(samples):
        if not isinstance(s, Sample):
            raise TypeError(f"item {i} is {type(s).__name__}, expected Sample")
        if validate:
            validate_sample(s, index=i)
    if config is not None:
        k, d = config.grid ** 2, config.d_feat
        for i, s in enumerate(samples):
            if s.features.data.shape != (k, d):
                raise ConfigError(f"sample {i}: features {s.features.data.shape} but config expects {(k, d)}")
            if config.use_queries and len(s.queries) > config.n_slots:
                raise ConfigError(f"sample {i}: {len(s.queries)} queries for {config.n_slots} slots")
    return samples


def check_features(x, k=None, d=None):
    """Float64 (B, K, D) array from a (K, D) or (B, K, D) input."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ShapeError(f"expected (K, D) or (B, K, D) features, got {x.shape}")
    if (k is not None and x.shape[1] != k) or (d is not None and x.shape[2] != d):
        raise ShapeError(f"features {x.shape[1:]} do not match ({k}, {d})")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain NaN or inf")
    return x


def check_is_fitted(est, attrs=("params_",)):
    from sklearn.exceptions import NotFittedError

    if not all(hasattr(est, a) for a in attrs):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")
