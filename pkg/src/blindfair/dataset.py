"""In-memory dataset and the whitening transform that travels with it."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def is_power_of_two(n: int) -> bool:
    return n >= 1 and not (n & (n - 1))


@dataclass
class Whitening:
    """Column-wise ``(x - mean) / scale``.

    Columns with ``scale == 1`` and ``mean == 0`` pass through untouched; the
    intercept column is stored that way.
    """

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray, passthrough=()) -> "Whitening":
        X = np.asarray(X, dtype=np.float64)
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        for j in passthrough:
            mean[j], scale[j] = 0.0, 1.0
        return cls(mean, scale)

    @classmethod
    def identity(cls, d: int) -> "Whitening":
        return cls(np.zeros(d), np.ones(d))

    def apply(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.scale

    @property
    def d(self) -> int:
        return len(self.mean)


@dataclass
class Dataset:
    """Whitened features ``X`` (n x d), labels ``y`` in {0,1}, sensitive ``Z`` (n x p) in {0,1}."""

    X: np.ndarray
    y: np.ndarray
    Z: np.ndarray
    whitening: Whitening | None = None
    feature_names: list = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        self.Z = np.asarray(self.Z, dtype=np.float64)
        if self.Z.ndim == 1:
            self.Z = self.Z[:, None]
        if not (len(self.X) == len(self.y) == len(self.Z)):
            raise ValueError("X, y and Z must have the same number of rows")

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def p(self) -> int:
        return self.Z.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.Z[idx], self.whitening, self.feature_names)
