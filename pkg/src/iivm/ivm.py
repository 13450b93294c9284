"""Import vector machine: greedy forward selection with backward drops.

Every candidate of a forward step is scored by the objective reached after a
single IRLS step on the enlarged import set. The enlarged normal matrix is a
bordered version of the current one, so all candidates are evaluated together
through its Schur complement instead of factorizing V+1 systems one by one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from . import klr
from .errors import NumericalError
from .kernel import KernelParams, kernel_matrix

log = logging.getLogger(__name__)

# bound on N * chunk * C floats held at once while scoring candidates
_TRIAL_BUDGET = 4_000_000


@dataclass(frozen=True)
class ConvergenceProbe:
    """Stop once |Q_i - Q_{i-lag}| / |Q_i| < epsilon."""

    epsilon: float = 1e-3
    lag: int = 1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.lag < 1:
            raise ValueError("lag must be >= 1")

    def ratio(self, history):
        if len(history) <= self.lag:
            return np.inf
        q, q_old = history[-1], history[-1 - self.lag]
        return abs(q - q_old) / max(abs(q), 1e-300)

    def converged(self, history):
        return self.ratio(history) < self.epsilon


@dataclass
class SelectionState:
    """Training rows plus the current import set and its fitted coefficients.

    Import vectors are stored by value in ``X_V``; ``iv_rows`` maps each one
    to its training row, or -1 when it has no counterpart in ``X``.
    """

    X: np.ndarray
    T: np.ndarray
    params: KernelParams
    lam: float
    X_V: np.ndarray = None
    iv_rows: list = field(default_factory=list)
    alpha: np.ndarray = None
    tol: float = 1e-6
    max_iter: int = 100

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.T = np.asarray(self.T, dtype=float)
        if self.X_V is None:
            self.X_V = np.empty((0, self.X.shape[1]))
        self.X_V = np.asarray(self.X_V, dtype=float).reshape(-1, self.X.shape[1])
        self.iv_rows = [int(i) for i in self.iv_rows]
        if len(self.iv_rows) != self.X_V.shape[0]:
            raise ValueError("iv_rows must have one entry per import vector")
        if self.alpha is None:
            self.alpha = np.zeros((self.V, self.C))
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(self.V, self.C)
        self._rebuild()

    @classmethod
    def from_rows(cls, X, T, params, lam, rows=(), **kw):
        X = np.asarray(X, dtype=float)
        rows = list(rows)
        return cls(X, T, params, lam, X_V=X[rows], iv_rows=rows, **kw)

    @property
    def N(self):
        return self.X.shape[0]

    @property
    def V(self):
        return self.X_V.shape[0]

    @property
    def C(self):
        return self.T.shape[1]

    def _rebuild(self):
        if self.V:
            self.K_V = kernel_matrix(self.X, self.X_V, self.params)
            self.K_R = kernel_matrix(self.X_V, self.X_V, self.params)
        else:
            self.K_V = np.empty((self.N, 0))
            self.K_R = np.empty((0, 0))
        self.refresh()

    def refresh(self):
        self.scores = self.K_V @ self.alpha
        self.probs = klr._scores_to_probs(self.scores)
        self.Q = klr.objective(self.probs, self.T, self.alpha, self.K_R, self.lam)

    def irls(self):
        return klr.IrlsState(self.K_V, self.K_R, self.alpha, self.lam, self.T)

    def candidates(self):
        taken = set(self.iv_rows)
        return np.array([n for n in range(self.N) if n not in taken], dtype=int)

    def copy(self):
        new = object.__new__(SelectionState)
        new.__dict__.update(self.__dict__)
        new.iv_rows = list(self.iv_rows)
        for name in ("X_V", "alpha", "K_V", "K_R", "scores", "probs"):
            setattr(new, name, getattr(self, name).copy())
        return new

    def set_import_set(self, X_V, iv_rows, alpha):
        self.X_V = np.asarray(X_V, dtype=float).reshape(-1, self.X.shape[1])
        self.iv_rows = list(iv_rows)
        self.alpha = np.asarray(alpha, dtype=float).reshape(self.V, self.C)
        self._rebuild()

    def append_rows(self, X_new, T_new):
        """Add training rows; the import set and alpha are untouched."""
        X_new = np.asarray(X_new, dtype=float).reshape(-1, self.X.shape[1])
        T_new = np.asarray(T_new, dtype=float).reshape(-1, self.C)
        K_new = (kernel_matrix(X_new, self.X_V, self.params) if self.V
                 else np.empty((X_new.shape[0], 0)))
        self.X = np.vstack([self.X, X_new])
        self.T = np.vstack([self.T, T_new])
        self.K_V = np.vstack([self.K_V, K_new])
        self.refresh()

    def drop_rows(self, rows):
        """Remove training rows. Import vectors whose row disappears become detached."""
        rows = np.unique(np.asarray(rows, dtype=int))
        keep = np.ones(self.N, dtype=bool)
        keep[rows] = False
        new_index = np.cumsum(keep) - 1
        self.X = self.X[keep]
        self.T = self.T[keep]
        self.K_V = self.K_V[keep]
        self.iv_rows = [int(new_index[r]) if r >= 0 and keep[r] else -1 for r in self.iv_rows]
        self.refresh()

    def refit(self):
        """Converge IRLS on the current import set, warm-started from alpha."""
        self.alpha, _ = klr.fit(self.K_V, self.K_R, self.T, self.lam,
                                tol=self.tol, max_iter=self.max_iter, alpha0=self.alpha)
        self.refresh()
        return self.Q


def _objective_many(F, T, pen):
    """Objective for a stack of score tensors F (N, B, C) with penalties (B,)."""
    N = F.shape[0]
    if T.shape[1] == 1:
        t = T[:, 0][:, None]
        f = F[:, :, 0]
        # -log p = softplus(-f), -log(1-p) = softplus(f); clamp like klr.objective
        lo, hi = np.log(klr.P_CLAMP), np.log1p(-klr.P_CLAMP)
        logp = np.clip(-np.logaddexp(0.0, -f), lo, hi)
        log1mp = np.clip(-np.logaddexp(0.0, f), lo, hi)
        ll = (t * logp + (1.0 - t) * log1mp).sum(axis=0)
    else:
        logp = F - logsumexp(F, axis=2, keepdims=True)
        logp = np.clip(logp, np.log(klr.P_CLAMP), np.log1p(-klr.P_CLAMP))
        ll = np.einsum("nbc,nc->b", logp, T)
    return -ll / N + pen


def trial_objectives(state: SelectionState, candidates):
    """Objective after one IRLS step with each candidate appended to the import set.

    Candidates whose bordered normal matrix is singular get ``+inf``.
    The state is not modified.
    """
    cand = np.asarray(candidates, dtype=int).ravel()
    out = np.full(cand.size, np.inf)
    if cand.size == 0:
        return out
    N, V, C = state.N, state.V, state.C
    lam = state.lam
    P, T = state.probs, state.T
    R = klr.weights(P)
    G = klr.gradient(state.K_V, P, T, state.alpha, state.K_R, lam) if V else np.empty((0, C))
    jit = klr.jitter(state.K_R)

    factors = []
    for c in range(C):
        if V:
            A = klr.normal_matrix(state.K_V, R[:, c], state.K_R, lam)
            try:
                cf = linalg.cho_factor(A)
            except linalg.LinAlgError:
                raise NumericalError("current normal matrix is singular",
                                     condition=np.linalg.cond(A)) from None
            d0 = -linalg.cho_solve(cf, G[:, c])
        else:
            cf, d0 = None, np.empty(0)
        factors.append((cf, d0))

    chunk = max(1, _TRIAL_BUDGET // max(1, N * C))
    for start in range(0, cand.size, chunk):
        idx = cand[start:start + chunk]
        B = idx.size
        Kc = kernel_matrix(state.X, state.X[idx], state.params)          # (N, B)
        Kvc = (kernel_matrix(state.X_V, state.X[idx], state.params)
               if V else np.empty((0, B)))                               # (V, B)
        kcc = np.ones(B)
        F = np.empty((N, B, C))
        pen = np.zeros(B)
        bad = np.zeros(B, dtype=bool)
        for c in range(C):
            cf, d0 = factors[c]
            a = state.alpha[:, c]
            rc = R[:, c]
            u = (state.K_V.T @ (rc[:, None] * Kc)) / N + lam * Kvc     # (V, B)
            d = np.einsum("nb,n,nb->b", Kc, rc, Kc) / N + lam * kcc + jit
            g_new = Kc.T @ (P[:, c] - T[:, c]) / N + lam * (Kvc.T @ a)
            if V:
                W = linalg.cho_solve(cf, u)                             # (V, B)
                s = d - np.einsum("vb,vb->b", u, W)
                dc = -(g_new - W.T @ G[:, c]) / s
            else:
                W = np.empty((0, B))
                s = d
                dc = -g_new / s
            bad |= ~(np.isfinite(s) & (s > 0) & np.isfinite(dc))
            base = state.scores[:, c] + state.K_V @ d0 if V else np.zeros(N)
            F[:, :, c] = base[:, None] + (Kc - state.K_V @ W) * dc[None, :]
            # penalty of [a0 - W dc; dc] under the bordered K_R
            if V:
                a0 = a + d0
                KRa0 = state.K_R @ a0
                quad = (a0 @ KRa0 - 2.0 * dc * (W.T @ KRa0)
                        + dc ** 2 * np.einsum("vb,vb->b", W, state.K_R @ W))
                cross = Kvc.T @ a0 - dc * np.einsum("vb,vb->b", Kvc, W)
                pen += 0.5 * lam * (quad + 2.0 * dc * cross + dc ** 2 * kcc)
            else:
                pen += 0.5 * lam * dc ** 2 * kcc
        with np.errstate(invalid="ignore", over="ignore"):
            q = _objective_many(F, T, pen)
        q[bad | ~np.isfinite(q)] = np.inf
        out[start:start + B] = q
    return out


def trial_objective(state: SelectionState, candidate) -> float:
    """Objective after one IRLS step with ``candidate`` added (pure)."""
    if candidate in state.iv_rows:
        raise ValueError(f"row {candidate} is already an import vector")
    return float(trial_objectives(state, [candidate])[0])


def forward_step(state: SelectionState, candidates=None, refit=True):
    """Commit the candidate with the lowest trial objective.

    Ties go to the lowest training index. Returns ``(row, trial_Q)``.
    """
    if candidates is None:
        candidates = state.candidates()
    cand = np.sort(np.asarray(candidates, dtype=int))
    if cand.size == 0:
        raise ValueError("no candidates to evaluate")
    q = trial_objectives(state, cand)
    if not np.any(np.isfinite(q)):
        raise NumericalError("no admissible candidate")
    j = int(np.argmin(q))  # first minimum = lowest index after sorting
    row = int(cand[j])
    X_V = np.vstack([state.X_V, state.X[row]])
    alpha = np.vstack([state.alpha, np.zeros((1, state.C))])
    state.set_import_set(X_V, state.iv_rows + [row], alpha)
    if refit:
        state.refit()
    else:
        state.alpha = klr.irls_step(state.irls())
        state.refresh()
    return row, float(q[j])


def removal_objectives(state: SelectionState):
    """Objective after dropping each import vector and taking one IRLS step."""
    V, C, N = state.V, state.C, state.N
    out = np.full(V, np.inf)
    alphas = [None] * V
    for j in range(V):
        keep = np.arange(V) != j
        K_V = state.K_V[:, keep]
        K_R = state.K_R[np.ix_(keep, keep)]
        # warm start: project the dropped vector's share of the decision
        # function onto the remaining ones (exact for a duplicate)
        Kj = K_R + klr.jitter(K_R) * np.eye(V - 1)
        try:
            a = state.alpha[keep] + np.outer(linalg.solve(Kj, state.K_R[keep, j], assume_a="pos"),
                                             state.alpha[j])
        except (linalg.LinAlgError, ValueError):
            a = state.alpha[keep]
        sub = klr.IrlsState(K_V, K_R, a, state.lam, state.T)
        try:
            a_new = klr.irls_step(sub)
        except NumericalError:
            continue
        out[j] = klr.objective(klr.probabilities(K_V, a_new), state.T, a_new, K_R, state.lam)
        alphas[j] = a_new
    return out, alphas


def backward_step(state: SelectionState, rel_tol=1e-6, refit=True):
    """Drop the least useful import vector if that costs at most ``rel_tol`` in Q.

    Returns the training row of the removed vector (-1 for detached ones), or
    ``None`` when nothing was removed.
    """
    if state.V < 2:
        return None
    q, alphas = removal_objectives(state)
    j = int(np.argmin(q))
    if not (np.isfinite(q[j]) and q[j] <= state.Q * (1.0 + rel_tol)):
        return None
    removed = state.iv_rows[j]
    keep = np.arange(state.V) != j
    rows = [r for i, r in enumerate(state.iv_rows) if i != j]
    state.set_import_set(state.X_V[keep], rows, alphas[j])
    if refit:
        state.refit()
    return removed


def stepwise(state: SelectionState, probe=ConvergenceProbe(), max_iv=None,
             n_candidates=None, rng=None, backward=True, max_rounds=None):
    """Alternate forward and backward steps until the probe fires.

    The forward step that triggers convergence is rolled back, so re-running on
    the returned state is a no-op. The very first import vector is always kept.
    Returns the committed Q history (one entry per round, starting with the
    objective of the incoming state).
    """
    max_iv = state.N if max_iv is None else min(max_iv, state.N)
    max_rounds = 2 * max_iv + 10 if max_rounds is None else max_rounds
    history = [state.Q]
    for _ in range(max_rounds):
        if state.V >= max_iv:
            break
        cand = state.candidates()
        if cand.size == 0:
            break
        if n_candidates is not None and cand.size > n_candidates:
            rng = np.random.default_rng(rng)
            cand = np.sort(rng.choice(cand, size=n_candidates, replace=False))
        saved = state.copy() if state.V else None
        forward_step(state, cand)
        history.append(state.Q)
        if saved is not None and probe.converged(history):
            state.__dict__.update(saved.__dict__)
            history.pop()
            break
        if backward:
            backward_step(state)
            history[-1] = state.Q
    return history


@dataclass
class IvmModel:
    """Self-contained trained classifier."""

    X_V: np.ndarray
    alpha: np.ndarray
    params: KernelParams
    lam: float
    class_names: list
    mean: np.ndarray = None
    std: np.ndarray = None
    n_train: int = 0
    q: float = float("nan")

    def __post_init__(self):
        self.X_V = np.asarray(self.X_V, dtype=float)
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.class_names = [str(c) for c in self.class_names]

    @property
    def n_classes(self):
        return len(self.class_names)

    @property
    def n_features(self):
        return self.X_V.shape[1]

    @property
    def V(self):
        return self.X_V.shape[0]

    @property
    def binary(self):
        return self.alpha.shape[1] == 1

    def decision_probs(self, X):
        """Raw model probabilities, (N, 1) in binary mode."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected features with {self.n_features} columns, got {X.shape}")
        return klr.probabilities(kernel_matrix(X, self.X_V, self.params), self.alpha)

    def predict_proba(self, X):
        return klr.class_probabilities(self.decision_probs(X))

    def predict(self, X):
        return predict(self, X)[1]


def predict(model: IvmModel, X):
    """Probabilities (N, K) and labels 1..K."""
    P = model.predict_proba(X)
    return P, np.argmax(P, axis=1) + 1


def targets_for(y, n_classes, binary=None):
    binary = (n_classes == 2) if binary is None else binary
    return klr.one_hot(y, n_classes, binary=binary)


def train(X, y, params: KernelParams, lam, probe=ConvergenceProbe(), max_iv=None,
          class_names=None, n_classes=None, binary=None, n_candidates=None, seed=0,
          backward=True, tol=1e-6, mean=None, std=None):
    """Train an IVM on features ``X`` (N, M) with labels ``y`` in 1..K."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if n_classes is None:
        n_classes = len(class_names) if class_names is not None else int(y.max())
    present = np.unique(y)
    missing = sorted(set(range(1, n_classes + 1)) - set(present.tolist()))
    if missing:
        raise ValueError(f"classes without training samples: {missing}")
    if class_names is None:
        class_names = [str(k) for k in range(1, n_classes + 1)]
    T = targets_for(y, n_classes, binary)
    max_iv = min(X.shape[0], 500) if max_iv is None else max_iv
    state = SelectionState(X, T, params, lam, tol=tol)
    rng = np.random.default_rng(seed)
    stepwise(state, probe, max_iv=max_iv, n_candidates=n_candidates, rng=rng, backward=backward)
    return model_from_state(state, class_names, mean=mean, std=std)


def model_from_state(state: SelectionState, class_names, mean=None, std=None):
    return IvmModel(state.X_V.copy(), state.alpha.copy(), state.params, state.lam,
                    list(class_names), mean=mean, std=std, n_train=state.N, q=state.Q)


def train_full(X, y, params, lam, n_classes=None, binary=None, tol=1e-6, max_iter=100):
    """Non-sparse kernel logistic regression (every sample is an import vector)."""
    X = np.asarray(X, dtype=float)
    n_classes = int(np.max(y)) if n_classes is None else n_classes
    T = targets_for(y, n_classes, binary)
    K = kernel_matrix(X, X, params)
    alpha, hist = klr.fit(K, K, T, lam, tol=tol, max_iter=max_iter)
    return IvmModel(X.copy(), alpha, params, lam, [str(k) for k in range(1, n_classes + 1)],
                    n_train=X.shape[0], q=hist[-1])
