import numpy as np
import pytest

from iivm import klr
from iivm.kernel import KernelParams, kernel_matrix


def gaussian_blobs(n_per_class, n_classes=3, dim=2, sep=2.0, seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_classes, dim))
    centers *= sep / max(np.linalg.norm(centers[0] - centers[1]), 1e-3)
    y = np.repeat(np.arange(1, n_classes + 1), n_per_class)
    X = centers[y - 1] + rng.normal(size=(y.size, dim))
    return X, y


def klr_instance(seed, n_classes=3, N=40, V=8, dim=2, gamma=0.5, lam=1e-2):
    """Random KLR problem: (K_V, K_R, T, lam) with import vectors from the rows."""
    rng = np.random.default_rng(seed)
    X, y = gaussian_blobs(N // n_classes + 1, n_classes, dim, sep=1.5, seed=seed)
    X, y = X[:N], y[:N]
    rows = rng.choice(N, size=V, replace=False)
    p = KernelParams(gamma)
    K_V = kernel_matrix(X, X[rows], p)
    K_R = kernel_matrix(X[rows], X[rows], p)
    T = klr.one_hot(y, n_classes, binary=n_classes == 2)
    return K_V, K_R, T, lam


@pytest.fixture
def blobs3():
    return gaussian_blobs(30, 3, 2, sep=3.0, seed=1)
