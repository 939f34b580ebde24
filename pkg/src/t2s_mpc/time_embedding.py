"""Sinusoidal time features fed to the residual model."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

DEFAULT_DIM = 32


def frequencies(dim: int = DEFAULT_DIM) -> np.ndarray:
    """Angular frequencies ``pi / i`` for ``i = 1 .. dim/2`` (rad/s)."""
    _check_dim(dim)
    return np.pi / np.arange(1, dim // 2 + 1)


def embed(t, dim: int = DEFAULT_DIM) -> np.ndarray:
    """Embed time(s) in seconds as ``[sin(w_1 t) .. sin(w_h t), cos(w_1 t) .. cos(w_h t)]``.

    Scalar ``t`` gives shape ``(dim,)``; an array of shape ``(n,)`` gives ``(n, dim)``.
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError("time must be >= 0")
    phase = t_arr[..., None] * frequencies(dim)
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


def _check_dim(dim):
    if not isinstance(dim, (int, np.integer)) or dim < 2 or dim % 2:
        raise ValueError(f"embedding dimension must be an even integer >= 2, got {dim!r}")


class SinusoidalTimeEmbedding(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping a column of times to ``dim`` features."""

    def __init__(self, dim: int = DEFAULT_DIM):
        self.dim = dim

    def fit(self, X, y=None):
        _check_dim(self.dim)
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        t = np.asarray(X, dtype=float).reshape(-1)
        return embed(t, self.dim)

    def get_feature_names_out(self, input_features=None):
        half = self.dim // 2
        return np.array([f"sin_{i}" for i in range(1, half + 1)] + [f"cos_{i}" for i in range(1, half + 1)])
