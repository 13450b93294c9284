"""Incremental updates of a trained IVM.

Training rows can be added and removed without re-forming the normal matrix
from scratch. Per class the state caches

* ``G_c = K_V' R_c K_V`` summed over the current rows (unnormalized), and
* a generalized eigendecomposition ``Phi_c' G_c Phi_c = diag(mu_c)``,
  ``Phi_c' (lam K_R + jitter) Phi_c = I``,

so that the inverse of ``A_c(N) = G_c / N + lam K_R + jitter`` is available
for any sample count ``N`` as ``Phi_c diag(1 / (1 + mu_c / N)) Phi_c'``.
Adding or removing ``dN`` rows then costs a ``dN x dN`` Sherman-Morrison-
Woodbury solve on top of that cached inverse. A removal uses the same update
with the sign of the removed rows' weights flipped.

The update is one Newton step for the enlarged (or reduced) problem; IRLS then
refines it to convergence so that incremental and batch training optimize the
same objective.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from . import klr
from .errors import NumericalError
from .ivm import ConvergenceProbe, IvmModel, SelectionState, stepwise, targets_for
from .kernel import KernelParams, kernel_matrix

log = logging.getLogger(__name__)

COHERENCE_TOL = 1e-8
PRUNE_LIMIT = 1.05


class FallbackWarning(RuntimeWarning):
    """An incremental update fell back to a full refit."""


def smw_update(A_inv, U, c):
    """Inverse of ``A + U' diag(c) U`` from ``A^{-1}``.

    ``U`` is (r, n) with one row per rank-one term, ``c`` (r,) nonzero weights;
    negative weights give a downdate. Raises NumericalError when the r x r
    inner matrix ``diag(1/c) + U A^{-1} U'`` is singular, or, for pure
    downdates, when the result would not be positive definite.
    """
    A_inv = np.asarray(A_inv, dtype=float)
    U = np.atleast_2d(np.asarray(U, dtype=float))
    c = np.atleast_1d(np.asarray(c, dtype=float))
    if U.shape[0] == 0:
        return A_inv.copy()
    if np.any(c == 0):
        raise ValueError("SMW weights must be nonzero")
    AU = A_inv @ U.T                                   # (n, r)
    S = np.diag(1.0 / c) + U @ AU
    S = 0.5 * (S + S.T)
    if np.all(c < 0):
        # A - U'CU is PD  <=>  C^{-1} - U A^{-1} U' is PD
        try:
            linalg.cho_factor(-S)
        except linalg.LinAlgError:
            raise NumericalError("downdate makes the normal matrix indefinite") from None
    try:
        lu = linalg.lu_factor(S, check_finite=True)
    except (linalg.LinAlgError, ValueError):
        raise NumericalError("SMW inner matrix is singular") from None
    if np.any(np.abs(np.diag(lu[0])) <= np.finfo(float).eps * np.abs(S).max() * S.shape[0]):
        raise NumericalError("SMW inner matrix is singular", condition=np.linalg.cond(S))
    out = A_inv - AU @ linalg.lu_solve(lu, AU.T)
    return 0.5 * (out + out.T)


@dataclass
class CooksReport:
    distance: np.ndarray
    leverage: np.ndarray
    n_params: int
    mse: float
    dominant: np.ndarray


def hat_diagonal(K, r):
    """diag(K (K' R K)^+ K' R) for weights ``r``; rank-deficient K handled by SVD.

    The weighted hat matrix is similar to the orthogonal projector onto the
    column space of ``R^{1/2} K``, whose diagonal is computed here directly.
    """
    K = np.asarray(K, dtype=float)
    r = np.asarray(r, dtype=float)
    if K.shape[1] == 0:
        return np.zeros(K.shape[0])
    B = np.sqrt(r)[:, None] * K
    U, s, _ = np.linalg.svd(B, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return np.zeros(K.shape[0])
    rank = int(np.sum(s > s[0] * max(B.shape) * np.finfo(float).eps))
    return np.einsum("ij,ij->i", U[:, :rank], U[:, :rank])


def cooks_distance(P, T, leverage, n_params, mse):
    """d_n = |p_n - t_n|^2 / (a MSE) * l_n / (1 - l_n)^2 with l clamped below 1."""
    l = np.minimum(np.asarray(leverage, dtype=float), 1.0 - 1e-9)
    res = np.sum((np.asarray(P) - np.asarray(T)) ** 2, axis=1)
    return res / (n_params * mse) * l / (1.0 - l) ** 2


@dataclass
class IncrementalState:
    """Incrementally updatable IVM plus the retained training rows."""

    sel: SelectionState
    y: np.ndarray
    class_names: list
    origin: list = None
    added_at: np.ndarray = None
    pixel: np.ndarray = None
    mean: np.ndarray = None
    std: np.ndarray = None
    n_initial: int = field(init=False)
    n_acquired: int = 0
    n_removed: int = 0
    iteration: int = 0

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=int)
        n = self.sel.N
        self.origin = ["initial"] * n if self.origin is None else list(self.origin)
        self.added_at = np.zeros(n, dtype=int) if self.added_at is None else np.asarray(self.added_at)
        self.pixel = np.full(n, -1, dtype=int) if self.pixel is None else np.asarray(self.pixel, dtype=int)
        self.n_initial = n
        self.rebuild_cache()

    # construction -----------------------------------------------------

    @classmethod
    def train(cls, X, y, params: KernelParams, lam, probe=ConvergenceProbe(), max_iv=None,
              class_names=None, binary=None, n_candidates=None, seed=0, tol=1e-6, **kw):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=int)
        n_classes = len(class_names) if class_names is not None else int(y.max())
        class_names = class_names or [str(k) for k in range(1, n_classes + 1)]
        T = targets_for(y, n_classes, binary)
        sel = SelectionState(X, T, params, lam, tol=tol)
        max_iv = min(X.shape[0], 500) if max_iv is None else max_iv
        stepwise(sel, probe, max_iv=max_iv, n_candidates=n_candidates,
                 rng=np.random.default_rng(seed))
        return cls(sel, y, class_names, **kw)

    @classmethod
    def from_model(cls, model: IvmModel, X, y, refit=False, tol=1e-6, **kw):
        """Wrap a trained model and its (normalized) training rows.

        Import vectors are matched to identical training rows; unmatched ones
        stay attached to the model only.
        """
        X = np.asarray(X, dtype=float)
        T = targets_for(y, model.n_classes, model.binary)
        rows = []
        for v in model.X_V:
            hit = np.flatnonzero(np.all(X == v, axis=1))
            rows.append(int(hit[0]) if hit.size else -1)
        sel = SelectionState(X, T, model.params, model.lam, X_V=model.X_V, iv_rows=rows,
                             alpha=model.alpha, tol=tol)
        if refit:
            sel.refit()
        kw.setdefault("mean", model.mean)
        kw.setdefault("std", model.std)
        return cls(sel, y, list(model.class_names), **kw)

    def model(self) -> IvmModel:
        return IvmModel(self.sel.X_V.copy(), self.sel.alpha.copy(), self.sel.params, self.sel.lam,
                        list(self.class_names), mean=self.mean, std=self.std,
                        n_train=self.N, q=self.Q)

    # bookkeeping ------------------------------------------------------

    @property
    def N(self):
        return self.sel.N

    @property
    def V(self):
        return self.sel.V

    @property
    def Q(self):
        return self.sel.Q

    @property
    def alpha(self):
        return self.sel.alpha

    @property
    def n_classes(self):
        return len(self.class_names)

    def class_counts(self):
        return np.bincount(self.y, minlength=self.n_classes + 1)[1:]

    def copy(self):
        new = object.__new__(IncrementalState)
        new.__dict__.update(self.__dict__)
        new.sel = self.sel.copy()
        new.y = self.y.copy()
        new.origin = list(self.origin)
        new.added_at = self.added_at.copy()
        new.pixel = self.pixel.copy()
        for name in ("_G", "_h", "_phi", "_mu"):
            setattr(new, name, getattr(self, name).copy())
        return new

    # cached inverse ---------------------------------------------------

    def rebuild_cache(self):
        sel = self.sel
        V, C = sel.V, sel.C
        R = klr.weights(sel.probs)
        self._G = np.empty((C, V, V))
        self._h = np.empty((C, V))
        self._phi = np.empty((C, V, V))
        self._mu = np.empty((C, V))
        if V == 0:
            return
        L = sel.lam * sel.K_R
        L[np.diag_indices_from(L)] += klr.jitter(sel.K_R)
        L = 0.5 * (L + L.T)
        for c in range(C):
            G = sel.K_V.T @ (R[:, c:c + 1] * sel.K_V)
            G = 0.5 * (G + G.T)
            mu, phi = linalg.eigh(G, L)
            self._G[c], self._mu[c], self._phi[c] = G, mu, phi
            self._h[c] = sel.K_V.T @ (sel.probs[:, c] - sel.T[:, c])

    def normal_matrix(self, c, N=None):
        """lam K_R + jitter + G_c / N from the cache."""
        N = self.N if N is None else N
        A = self._G[c] / N + self.sel.lam * self.sel.K_R
        A[np.diag_indices_from(A)] += klr.jitter(self.sel.K_R)
        return 0.5 * (A + A.T)

    def A_inv(self, c, N=None):
        N = self.N if N is None else N
        phi = self._phi[c]
        return (phi / (1.0 + self._mu[c] / N)) @ phi.T

    def coherence(self):
        """Largest ||A A_inv - I||_F / ||I||_F over classes."""
        if self.V == 0:
            return 0.0
        eye = np.eye(self.V)
        return max(np.linalg.norm(self.normal_matrix(c) @ self.A_inv(c) - eye) / np.sqrt(self.V)
                   for c in range(self.sel.C))

    def ensure_coherent(self):
        if self.coherence() > COHERENCE_TOL:
            log.info("cached inverse drifted; rebuilding")
            self.rebuild_cache()


def _validate_rows(state, X_new):
    X_new = np.asarray(X_new, dtype=float)
    if X_new.ndim == 1:
        X_new = X_new[None, :] if X_new.size else X_new.reshape(0, state.sel.X.shape[1])
    if X_new.shape[1] != state.sel.X.shape[1]:
        raise ValueError(f"expected {state.sel.X.shape[1]} features, got {X_new.shape[1]}")
    if not np.all(np.isfinite(X_new)):
        raise ValueError("new samples contain non-finite values")
    return X_new


def smw_step(state: IncrementalState, K_delta, P_delta, T_delta, sign):
    """One Newton step after adding (sign=+1) or removing (sign=-1) rows.

    ``K_delta`` (dN, V) are the kernel rows of the changed samples, ``P_delta``
    and ``T_delta`` their probabilities and targets at the current alpha.
    Returns the stepped alpha (V, C).
    """
    sel = state.sel
    N_s = state.N + sign * K_delta.shape[0]
    R_d = klr.weights(P_delta)
    alpha = sel.alpha.copy()
    for c in range(sel.C):
        base_inv = state.A_inv(c, N_s)
        A_new_inv = smw_update(base_inv, K_delta, sign * R_d[:, c] / N_s)
        h = state._h[c] + sign * K_delta.T @ (P_delta[:, c] - T_delta[:, c])
        g = h / N_s + sel.lam * (sel.K_R @ sel.alpha[:, c])
        alpha[:, c] = sel.alpha[:, c] - A_new_inv @ g
    return alpha


def _refine(state, alpha):
    sel = state.sel
    sel.alpha = np.asarray(alpha, dtype=float)
    sel.refresh()
    sel.refit()
    state.rebuild_cache()
    state.ensure_coherent()


def add_samples(state: IncrementalState, X_new, y_new, origin="acquired", pixel=None, refine=True):
    """Add labelled rows and update the model in place. Returns the state."""
    X_new = _validate_rows(state, X_new)
    y_new = np.asarray(y_new, dtype=int).ravel()
    dN = X_new.shape[0]
    if dN == 0:
        return state
    if y_new.size != dN:
        raise ValueError("one label per new sample required")
    sel = state.sel
    T_new = targets_for(y_new, state.n_classes, sel.C == 1)
    if sel.V:
        K_new = kernel_matrix(X_new, sel.X_V, sel.params)
        P_new = klr.probabilities(K_new, sel.alpha)
        try:
            alpha = smw_step(state, K_new, P_new, T_new, +1)
        except NumericalError as exc:
            warnings.warn(f"SMW add failed ({exc}); refitting from scratch", FallbackWarning)
            alpha = sel.alpha
    else:
        alpha = sel.alpha
    sel.append_rows(X_new, T_new)
    state.y = np.concatenate([state.y, y_new])
    tags = [origin] * dN if isinstance(origin, str) else list(origin)
    state.origin.extend(tags)
    state.added_at = np.concatenate([state.added_at, np.full(dN, state.iteration)])
    px = np.full(dN, -1) if pixel is None else np.asarray(pixel, dtype=int)
    state.pixel = np.concatenate([state.pixel, px])
    state.n_acquired += dN
    if refine:
        _refine(state, alpha)
    else:
        sel.alpha = alpha
        sel.refresh()
        state.rebuild_cache()
    return state


def remove_samples(state: IncrementalState, rows, refine=True):
    """Remove training rows (positions in the current block) in place."""
    rows = np.unique(np.asarray(rows, dtype=int).ravel())
    if rows.size == 0:
        return state
    if rows.min() < 0 or rows.max() >= state.N:
        raise IndexError("row index out of range")
    counts = state.class_counts()
    lost = np.bincount(state.y[rows], minlength=state.n_classes + 1)[1:]
    if np.any(counts - lost < 1):
        raise ValueError("removal would leave a class without training samples")
    sel = state.sel
    if sel.V:
        K_del = sel.K_V[rows]
        try:
            alpha = smw_step(state, K_del, sel.probs[rows], sel.T[rows], -1)
        except NumericalError as exc:
            warnings.warn(f"SMW downdate failed ({exc}); refitting from scratch", FallbackWarning)
            alpha = sel.alpha
    else:
        alpha = sel.alpha
    keep = np.ones(state.N, dtype=bool)
    keep[rows] = False
    sel.drop_rows(rows)
    state.y = state.y[keep]
    state.origin = [o for o, k in zip(state.origin, keep) if k]
    state.added_at = state.added_at[keep]
    state.pixel = state.pixel[keep]
    state.n_removed += rows.size
    if refine:
        _refine(state, alpha)
    else:
        sel.alpha = alpha
        sel.refresh()
        state.rebuild_cache()
    return state


def leverages(state: IncrementalState):
    """Weighted hat-matrix diagonal over the training rows.

    Each row is weighted with the IRLS weight of its own class.
    """
    sel = state.sel
    P = klr.class_probabilities(sel.probs)
    p_own = P[np.arange(state.N), state.y - 1]
    r = klr.weights(p_own)
    return hat_diagonal(sel.K_V, r)


def cooks_distances(state: IncrementalState) -> CooksReport:
    sel = state.sel
    P = klr.class_probabilities(sel.probs)
    T = klr.one_hot(state.y, state.n_classes)
    lev = leverages(state)
    dominant = lev >= 1.0 - 1e-9
    a = max(1, sel.V * sel.C)
    mse = 0.0
    for k in range(state.n_classes):
        members = state.y == k + 1
        if members.any():
            mse += 1.0 - float(P[members, k].mean())
    mse = max(mse, 1e-12)
    d = cooks_distance(P, T, lev, a, mse)
    return CooksReport(d, np.minimum(lev, 1.0 - 1e-9), a, mse, dominant)


def _removal_order(state, strategy):
    if strategy == "cooks":
        return np.argsort(cooks_distances(state).distance, kind="stable")
    if strategy == "fifo":
        return np.argsort(state.added_at, kind="stable")
    raise ValueError(f"unknown prune strategy {strategy!r}")


def _reference_objective(state, X_ref, T_ref):
    sel = state.sel
    P = klr.probabilities(kernel_matrix(X_ref, sel.X_V, sel.params), sel.alpha)
    return klr.objective(P, T_ref, sel.alpha, sel.K_R, sel.lam)


def prune(state: IncrementalState, limit=PRUNE_LIMIT, strategy="cooks", max_remove=None):
    """Greedy backward deletion of the least informative training rows.

    Rows are removed one at a time in increasing Cook's distance. Pruning
    stops, rolling back the offending removal, once either the objective of
    the pruned state or the objective of its coefficients on the rows present
    at entry exceeds ``limit`` times its entry value. The first guard alone
    does not bound anything: the objective is a per-sample mean and drops
    again once few rows remain. Rows backing an import vector are kept.
    Returns ``(state, n_removed)``.
    """
    if state.V == 0:
        return state, 0
    X_ref, T_ref = state.sel.X.copy(), state.sel.T.copy()
    baseline, q_entry = _reference_objective(state, X_ref, T_ref), state.Q
    removed = 0
    while max_remove is None or removed < max_remove:
        counts = state.class_counts()
        protected = set(r for r in state.sel.iv_rows if r >= 0)
        order = _removal_order(state, strategy)
        row = next((int(n) for n in order
                    if counts[state.y[n] - 1] > 1 and int(n) not in protected), None)
        if row is None:
            break
        saved = state.copy()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", FallbackWarning)
            remove_samples(state, [row])
        if (state.Q > limit * q_entry
                or _reference_objective(state, X_ref, T_ref) > limit * baseline):
            state.__dict__.update(saved.__dict__)
            break
        removed += 1
    return state, removed


def refresh_import_vectors(state: IncrementalState, probe=ConvergenceProbe(), max_iv=None,
                           n_candidates=None, seed=0):
    """Forward/backward stepwise selection starting from the current import set."""
    sel = state.sel
    max_iv = min(sel.N, 500) if max_iv is None else max_iv
    before = list(sel.iv_rows)
    stepwise(sel, probe, max_iv=max(max_iv, sel.V), n_candidates=n_candidates,
             rng=np.random.default_rng(seed))
    if sel.iv_rows != before:
        state.rebuild_cache()
    return state
