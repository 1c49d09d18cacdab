"""Input validation helpers and the package's exception types."""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Array shapes are inconsistent with what an operation requires."""


class ConfigError(ValueError):
    """A configuration value violates a documented constraint."""


class StateError(RuntimeError):
    """An operation was called in a state that forbids it."""


def check_images(X, image_size=None, name="X"):
    """Validate a batch of single-channel images, returning (N, 1, S, S) float array.

    Accepts (N, 1, S, S) or a single (1, S, S) image.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != 1:
        raise ShapeError(f"{name} must have shape (N, 1, S, S), got {X.shape}")
    if X.shape[2] != X.shape[3]:
        raise ShapeError(f"{name} images must be square, got {X.shape}")
    if image_size is not None and X.shape[2] != image_size:
        raise ShapeError(
            f"{name} image size {X.shape[2]} does not match the configured size {image_size}"
        )
    return X


def check_labels(y, n=None, name="y"):
    """Validate binary labels, returning a flat int array of 0/1."""
    y = np.asarray(y).reshape(-1)
    if y.size and not np.isin(y, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0/1 labels")
    y = y.astype(np.int64)
    if n is not None and y.shape[0] != n:
        raise ShapeError(f"{name} has {y.shape[0]} labels for {n} samples")
    return y


def check_same_shape(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{what}: shapes {np.shape(a)} and {np.shape(b)} differ")


def check_finite(x, what):
    if not np.isfinite(x).all():
        raise ValueError(f"{what} contains NaN or Inf")
    return x
