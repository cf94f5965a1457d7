"""Input checks shared by the estimators and the command line."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .masking import BlockLayout


def check_images(X, layout: BlockLayout | None = None) -> np.ndarray:
    """Return ``[N, C, H, W]`` float32 pixels in ``[0, 1]``.

    ``uint8`` input is divided by 255; float input must already lie in ``[0, 1]``.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped [N, C, H, W], got {X.shape}")
    if X.dtype == np.uint8:
        X = X.astype(np.float32) / np.float32(255.0)
    else:
        X = check_array(X.reshape(len(X), -1), dtype=np.float32, ensure_all_finite=True,
                        ensure_min_samples=0).reshape(X.shape)
        if X.size and (X.min() < 0.0 or X.max() > 1.0):
            raise ValueError("float images must lie in [0, 1]")
    if layout is not None and X.shape[1:] != (layout.channels, layout.height, layout.width):
        raise ValueError(f"images {X.shape[1:]} do not match layout "
                         f"{(layout.channels, layout.height, layout.width)}")
    return X


def check_features(X, ndim: tuple[int, ...] = (2, 3)) -> np.ndarray:
    """Finite float64 features shaped ``[N, E]`` or ``[N, T, E]``."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_samples=1)
    if X.ndim not in ndim:
        raise ValueError(f"features must have {' or '.join(map(str, ndim))} dims, got {X.shape}")
    return X


def mean_pool(X: np.ndarray) -> np.ndarray:
    return X.mean(axis=1) if X.ndim == 3 else X
