"""Input checks shared by the estimators."""

import numpy as np


def check_image_batch(X, n_channels=None):
    """Return ``X`` as a finite float64 ``(n, d, H, W)`` array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise ValueError(f"expected an (n, d, H, W) image batch, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("image batch is empty")
    if n_channels is not None and X.shape[1] != n_channels:
        raise ValueError(f"expected {n_channels} channels, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("image batch contains NaN or infinite values")
    return X


def check_labels(y, n_samples):
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"expected {n_samples} labels, got shape {y.shape}")
    return y
