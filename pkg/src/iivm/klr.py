"""Kernel logistic regression over an arbitrary set of import vectors.

Shapes used throughout:

* ``K_V``   (N, V) kernel between training samples and import vectors
* ``K_R``   (V, V) kernel among the import vectors (the regularizer)
* ``alpha`` (V, C) coefficients, one column per class
* ``T``     (N, C) 1-of-K targets

``C == 1`` selects the binary model with a logistic link (the single column is
the probability of the second class); ``C >= 2`` selects the softmax model.
Both share the same per-column Newton update::

    A_c   = 1/N K_V' R_c K_V + lam K_R
    alpha = A_c^{-1} 1/N K_V' R_c z_c,   z_c = K_V alpha_c + R_c^{-1} (t_c - p_c)

which is evaluated in the algebraically identical form
``alpha - A_c^{-1} grad_c`` so that the diagonal jitter only perturbs the step
length, never the fixed point.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import NumericalError

log = logging.getLogger(__name__)

P_CLAMP = 1e-12
JITTER = 1e-10
MAX_HALVINGS = 10
MAX_FAILED_STEPS = 3


def one_hot(y, n_classes, binary=False):
    """1-of-K targets from labels in 1..K. Binary mode keeps only class 2."""
    y = np.asarray(y, dtype=int)
    if y.size and (y.min() < 1 or y.max() > n_classes):
        raise ValueError(f"labels must lie in 1..{n_classes}")
    T = np.zeros((y.size, n_classes))
    T[np.arange(y.size), y - 1] = 1.0
    if binary:
        if n_classes != 2:
            raise ValueError("binary mode needs exactly two classes")
        return T[:, 1:]
    return T


def class_probabilities(P):
    """Expand a binary (N, 1) probability matrix to (N, 2); pass others through."""
    P = np.asarray(P, dtype=float)
    if P.shape[1] == 1:
        return np.hstack([1.0 - P, P])
    return P


def _scores_to_probs(F):
    if F.shape[1] == 1:
        return 1.0 / (1.0 + np.exp(-F))
    F = F - F.max(axis=1, keepdims=True)
    E = np.exp(F)
    return E / E.sum(axis=1, keepdims=True)


def probabilities(K_V, alpha):
    """Class probabilities for kernel rows ``K_V`` and coefficients ``alpha``."""
    K_V = np.asarray(K_V, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim == 1:
        alpha = alpha[:, None]
    if K_V.shape[1] != alpha.shape[0]:
        raise ValueError(f"K_V has {K_V.shape[1]} columns but alpha has {alpha.shape[0]} rows")
    return _scores_to_probs(K_V @ alpha)


def clamp(P):
    return np.clip(P, P_CLAMP, 1.0 - P_CLAMP)


def penalty(alpha, K_R, lam):
    if alpha.shape[0] == 0:
        return 0.0
    return 0.5 * lam * float(np.sum(alpha * (K_R @ alpha)))


def objective(P, T, alpha, K_R, lam, N=None):
    """Regularized negative log-likelihood.

    Multiclass: ``-1/N sum_n t_n' log p_n + lam/2 sum_k alpha_k' K_R alpha_k``;
    the binary form uses the Bernoulli likelihood of the single column.
    """
    P = np.asarray(P, dtype=float)
    T = np.asarray(T, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim == 1:
        alpha = alpha[:, None]
    if P.shape != T.shape:
        raise ValueError(f"probability shape {P.shape} != target shape {T.shape}")
    if alpha.shape[0] and (K_R.shape != (alpha.shape[0], alpha.shape[0])
                           or alpha.shape[1] != P.shape[1]):
        raise ValueError("alpha / K_R shapes inconsistent with probabilities")
    N = P.shape[0] if N is None else N
    Pc = clamp(P)
    if P.shape[1] == 1:
        ll = np.sum(T * np.log(Pc) + (1.0 - T) * np.log(1.0 - Pc))
    else:
        ll = np.sum(T * np.log(Pc))
    return float(-ll / N) + (penalty(alpha, K_R, lam) if lam else 0.0)


def gradient(K_V, P, T, alpha, K_R, lam):
    """Gradient of :func:`objective` with respect to ``alpha`` (V, C)."""
    N = K_V.shape[0]
    return K_V.T @ (P - T) / N + lam * (K_R @ alpha)


def weights(P):
    """IRLS weights r_n = p_n (1 - p_n) per column, from clamped probabilities."""
    Pc = clamp(P)
    return Pc * (1.0 - Pc)


def working_response(K_V, alpha, P, T):
    """z_c = K_V alpha_c + R_c^{-1} (t_c - p_c) for every column."""
    return K_V @ alpha + (T - P) / weights(P)


def jitter(K_R):
    V = K_R.shape[0]
    return JITTER * (float(np.trace(K_R)) / V if V else 1.0)


def normal_matrix(K_V, r, K_R, lam):
    """1/N K_V' diag(r) K_V + lam K_R + jitter I for one class column."""
    N = K_V.shape[0]
    A = K_V.T @ (r[:, None] * K_V) / N + lam * K_R
    A[np.diag_indices_from(A)] += jitter(K_R)
    return 0.5 * (A + A.T)


def solve_normal(A, b):
    """Solve with the SPD normal matrix; raise NumericalError if it is singular."""
    try:
        c = linalg.cho_factor(A, check_finite=True)
        return linalg.cho_solve(c, b)
    except (linalg.LinAlgError, ValueError):
        cond = np.linalg.cond(A) if np.all(np.isfinite(A)) else np.inf
        raise NumericalError("normal matrix is singular", condition=cond) from None


@dataclass
class IrlsState:
    """Training workspace for one import-vector set.

    ``probs`` is kept in sync with ``alpha`` by :meth:`refresh`; the
    per-class weights and working responses are derived from it on demand.
    """

    K_V: np.ndarray
    K_R: np.ndarray
    alpha: np.ndarray
    lam: float
    T: np.ndarray
    probs: np.ndarray = field(init=False)
    Q_history: list = field(default_factory=list)

    def __post_init__(self):
        self.K_V = np.asarray(self.K_V, dtype=float)
        self.K_R = np.asarray(self.K_R, dtype=float)
        self.T = np.asarray(self.T, dtype=float)
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(self.K_V.shape[1], self.T.shape[1])
        if self.K_R.shape != (self.K_V.shape[1],) * 2:
            raise ValueError("K_R must be V x V with V = K_V columns")
        if self.T.shape[0] != self.K_V.shape[0]:
            raise ValueError("targets and K_V disagree on N")
        self.refresh()

    @property
    def N(self):
        return self.K_V.shape[0]

    @property
    def V(self):
        return self.K_V.shape[1]

    @property
    def R(self):
        return weights(self.probs)

    @property
    def z(self):
        return working_response(self.K_V, self.alpha, self.probs, self.T)

    @property
    def Q(self):
        return objective(self.probs, self.T, self.alpha, self.K_R, self.lam)

    def refresh(self):
        self.probs = probabilities(self.K_V, self.alpha)
        return self

    def gradient(self):
        return gradient(self.K_V, self.probs, self.T, self.alpha, self.K_R, self.lam)


def newton_direction(state: IrlsState):
    """Per-class Newton direction -A_c^{-1} grad_c, shape (V, C)."""
    G = state.gradient()
    R = state.R
    D = np.empty_like(G)
    for c in range(G.shape[1]):
        A = normal_matrix(state.K_V, R[:, c], state.K_R, state.lam)
        D[:, c] = -solve_normal(A, G[:, c])
    return D


def irls_step(state: IrlsState, targets=None):
    """One full (undamped) IRLS update of ``alpha``; the state is not modified."""
    if targets is not None and not np.array_equal(np.asarray(targets, dtype=float), state.T):
        state = IrlsState(state.K_V, state.K_R, state.alpha, state.lam, targets)
    if state.V == 0:
        return state.alpha.copy()
    return state.alpha + newton_direction(state)


def center(alpha):
    """Remove the per-row mean across softmax columns.

    Softmax probabilities are unchanged by the shift while the penalty is
    minimized, so this is an exact line minimization along the redundant
    direction. Binary coefficients are returned untouched.
    """
    if alpha.shape[1] < 2:
        return alpha
    return alpha - alpha.mean(axis=1, keepdims=True)


def _q_at(K_V, K_R, T, lam, alpha):
    return objective(probabilities(K_V, alpha), T, alpha, K_R, lam)


def damped_step(state: IrlsState):
    """Newton step with step halving. Returns (alpha, Q, accepted)."""
    Q0 = state.Q
    D = newton_direction(state)
    step = 1.0
    slack = 1e-13 * max(abs(Q0), 1.0)
    for _ in range(MAX_HALVINGS + 1):
        a = center(state.alpha + step * D)
        Q = _q_at(state.K_V, state.K_R, state.T, state.lam, a)
        if np.isfinite(Q) and Q <= Q0 + slack:
            return a, Q, True
        step *= 0.5
    return state.alpha, Q0, False


def fit(K_V, K_R, T, lam, tol=1e-6, max_iter=100, alpha0=None, gtol=None):
    """Run damped IRLS to convergence.

    Stops once ``|dQ| / |Q| < tol`` (and, when ``gtol`` is given, the largest
    gradient entry is below it) or after ``max_iter`` steps.

    Returns
    -------
    alpha : ndarray (V, C)
    Q_history : list of float
        Objective before the first step and after every accepted step.
    """
    K_V = np.asarray(K_V, dtype=float)
    T = np.asarray(T, dtype=float)
    if alpha0 is None:
        alpha0 = np.zeros((K_V.shape[1], T.shape[1]))
    state = IrlsState(K_V, K_R, np.array(alpha0, dtype=float), lam, T)
    hist = [state.Q]
    if state.V == 0:
        return state.alpha, hist
    failures = 0
    for _ in range(max_iter):
        a, Q, ok = damped_step(state)
        if not ok:
            failures += 1
            # no descent along the Newton direction: either converged to
            # round-off or the step control is breaking down
            if np.max(np.abs(state.gradient())) < 1e-9:
                break
            if failures >= MAX_FAILED_STEPS:
                raise NumericalError("IRLS diverged: objective increased on safeguarded steps")
            continue
        failures = 0
        Q_prev = hist[-1]
        state.alpha = a
        state.refresh()
        hist.append(Q)
        small = abs(Q_prev - Q) <= tol * abs(Q)
        if small and (gtol is None or np.max(np.abs(state.gradient())) < gtol):
            break
    return state.alpha, hist


def predict_labels(P):
    """Labels 1..K from (N, C) probabilities (binary columns are expanded)."""
    return np.argmax(class_probabilities(P), axis=1) + 1
