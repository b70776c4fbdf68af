"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

import numpy as np


def check_images(X, *, multiple_of: int | None = None) -> np.ndarray:
    """Return ``(n, H, W)`` float64 images with finite values.

    A single ``(H, W)`` image is promoted to a batch of one; a trailing or
    leading singleton channel axis is dropped.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    elif X.ndim == 4 and X.shape[1] == 1:
        X = X[:, 0]
    elif X.ndim == 4 and X.shape[-1] == 1:
        X = X[..., 0]
    if X.ndim != 3:
        raise ValueError(f"expected images of shape (n, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no images given")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    if multiple_of and (X.shape[1] % multiple_of or X.shape[2] % multiple_of):
        raise ValueError(f"image sides must be multiples of {multiple_of}, got {X.shape[1:]}")
    return X


def check_landmarks(y, n_images: int, *, allow_missing: bool = False) -> np.ndarray:
    """Return ``(n, N, 2)`` float64 landmarks; NaN rows allowed when ``allow_missing``."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 3 or y.shape[-1] != 2:
        raise ValueError(f"expected landmarks of shape (n, N, 2), got {y.shape}")
    if y.shape[0] != n_images:
        raise ValueError(f"{y.shape[0]} landmark rows for {n_images} images")
    if y.shape[1] < 1:
        raise ValueError("need at least one landmark per image")
    bad = ~np.isfinite(y)
    if bad.any():
        if not allow_missing:
            raise ValueError("landmarks contain non-finite values")
        partial = bad.any(axis=(1, 2)) & ~bad.all(axis=(1, 2))
        if partial.any():
            raise ValueError(f"images {np.flatnonzero(partial).tolist()} are only partly labeled")
    return y


def find_exemplar(y: np.ndarray) -> int:
    """Index of the single fully labeled row of ``y``; every other row must be NaN."""
    labeled = np.flatnonzero(np.isfinite(y).all(axis=(1, 2)))
    if len(labeled) != 1:
        raise ValueError(f"expected exactly one labeled exemplar, found {len(labeled)}")
    return int(labeled[0])
