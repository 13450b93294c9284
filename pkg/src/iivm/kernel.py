"""RBF kernel evaluation.

No constant feature is appended to the inputs: an RBF kernel only sees
differences, so a shared bias coordinate would add a zero term to every
distance. A linear kernel would need explicit augmentation.

Inputs are expected to be normalized already (see :mod:`iivm.data`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class KernelParams:
    """Kernel family and width. ``gamma`` is the inverse squared length-scale."""

    gamma: float
    kind: str = "rbf"

    def __post_init__(self):
        if self.kind != "rbf":
            raise ValueError(f"unsupported kernel kind {self.kind!r}")
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError(f"gamma must be positive and finite, got {self.gamma}")


def _as_matrix(X, name):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D feature matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def rbf(x, y, params: KernelParams) -> float:
    """exp(-gamma * ||x - y||^2) for two feature vectors."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite input")
    d = x - y
    return float(np.exp(-params.gamma * float(d @ d)))


def sq_distances(A, B):
    """Squared Euclidean distances via ||a||^2 + ||b||^2 - 2 a.b, clamped at 0."""
    aa = np.einsum("ij,ij->i", A, A)
    bb = np.einsum("ij,ij->i", B, B)
    D = aa[:, None] + bb[None, :] - 2.0 * (A @ B.T)
    np.maximum(D, 0.0, out=D)
    return D


def kernel_matrix(rows, cols, params: KernelParams) -> np.ndarray:
    """Kernel matrix with entry (i, j) = rbf(rows[i], cols[j])."""
    A = _as_matrix(rows, "rows")
    B = _as_matrix(cols, "cols")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]} features")
    same = A is B or (A.shape == B.shape and np.array_equal(A, B))
    K = np.exp(-params.gamma * sq_distances(A, B))
    if same:
        # exact symmetry and unit diagonal for self-kernels
        K = 0.5 * (K + K.T)
        np.fill_diagonal(K, 1.0)
    return K


def kernel_row(x, cols, params: KernelParams) -> np.ndarray:
    """Kernel values between a single vector and every row of ``cols``."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("kernel_row expects a single feature vector")
    B = _as_matrix(cols, "cols")
    if x.shape[0] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[0]} vs {B.shape[1]} features")
    return kernel_matrix(x[None, :], B, params)[0]
