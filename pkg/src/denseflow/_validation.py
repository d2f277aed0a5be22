"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numbers

import numpy as np

from .errors import DataFormatError


def check_images(X, channels=None, height=None, width=None):
    """Validate a (n, c, h, w) batch of discrete images and return it as a
    contiguous uint8 array."""
    X = np.asarray(X)
    if X.ndim != 4:
        raise DataFormatError(
            f"expected images shaped (n, channels, height, width), got {X.shape}"
        )
    if X.shape[0] == 0:
        raise DataFormatError("empty image batch")
    if not np.issubdtype(X.dtype, np.integer):
        if np.issubdtype(X.dtype, np.floating) and np.allclose(X, np.rint(X)):
            X = np.rint(X).astype(np.int64)
        else:
            raise DataFormatError(
                f"pixel values must be integers in [0, 255], got dtype {X.dtype}"
            )
    if X.min() < 0 or X.max() > 255:
        raise DataFormatError(
            f"pixel values outside [0, 255]: min {X.min()}, max {X.max()}"
        )
    expected = (channels, height, width)
    if any(e is not None for e in expected):
        got = X.shape[1:]
        for name, e, g in zip(("channels", "height", "width"), expected, got):
            if e is not None and e != g:
                raise DataFormatError(f"images have {name}={g}, expected {e}")
    return np.ascontiguousarray(X.astype(np.uint8))


def check_random_state(random_state):
    """None | int | Generator -> numpy Generator (sklearn convention,
    adapted to the numpy Generator API)."""
    if random_state is None:
        return np.random.default_rng()
    if isinstance(random_state, numbers.Integral):
        return np.random.default_rng(int(random_state))
    if isinstance(random_state, np.random.Generator):
        return random_state
    raise DataFormatError(
        f"random_state must be None, an int or a numpy Generator, "
        f"got {type(random_state).__name__}"
    )
