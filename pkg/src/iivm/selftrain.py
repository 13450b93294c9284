"""Self-training driven by disagreement between the classifier and its DRF smoothing.

Each iteration predicts every pixel, smooths the posteriors with the Potts
DRF, and harvests pixels where the two labelings disagree and the classifier
is unsure. Those pixels enter the training set with their DRF label, ranked by
leverage and balanced across classes; the model is then updated incrementally,
pruned and its import set refreshed.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import drf, klr, metrics
from .errors import DataError
from .incremental import IncrementalState, add_samples, hat_diagonal, prune, refresh_import_vectors
from .ivm import ConvergenceProbe
from .kernel import kernel_matrix

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("iteration", "added", "pruned", "n_train", "n_iv", "q", "oa", "aa", "kappa")
DISAGREEMENT, AGREEMENT, OVERSAMPLED = "disagreement", "agreement", "oversampled"


@dataclass
class AcquisitionConfig:
    uncertainty_ceiling: float = 0.5
    probability_floor: float = 0.1
    per_class_quota: int = 20
    noise_sigma_fraction: float = 0.01
    max_iterations: int = 20
    seed: int = 0
    prune_every_iteration: bool = True
    prune_limit: float = 1.05
    beta: float = 1.0
    connectivity: int = 4
    probe: ConvergenceProbe = field(default_factory=ConvergenceProbe)
    max_iv: int = None

    def __post_init__(self):
        if not 0 < self.probability_floor < self.uncertainty_ceiling <= 1:
            raise ValueError("need 0 < probability_floor < uncertainty_ceiling <= 1")
        if self.per_class_quota < 1:
            raise ValueError("per_class_quota must be >= 1")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.noise_sigma_fraction < 0:
            raise ValueError("noise_sigma_fraction must be >= 0")


@dataclass
class CandidatePool:
    pixel: np.ndarray
    label: np.ndarray            # DRF label, 1..K
    probs: np.ndarray            # (J, K) classifier posteriors
    leverage: np.ndarray = None
    provenance: str = DISAGREEMENT

    def __len__(self):
        return self.pixel.size

    def take(self, idx):
        idx = np.asarray(idx, dtype=int)
        lev = None if self.leverage is None else self.leverage[idx]
        return CandidatePool(self.pixel[idx], self.label[idx], self.probs[idx], lev, self.provenance)


def acquire(probs, ivm_labels, drf_labels, config: AcquisitionConfig, exclude=None):
    """Disagreeing pixels with floor <= max(p) < ceiling, labelled by the DRF."""
    P = np.asarray(probs, dtype=float)
    a = np.asarray(ivm_labels).ravel()
    b = np.asarray(drf_labels).ravel()
    if not (P.shape[0] == a.size == b.size):
        raise ValueError("probabilities and labelings must cover the same pixels")
    pmax = P.max(axis=1)
    mask = (a != b) & (pmax < config.uncertainty_ceiling) & (pmax >= config.probability_floor)
    if exclude is not None and len(exclude):
        mask[np.asarray(exclude, dtype=int)] = False
    idx = np.flatnonzero(mask)
    return CandidatePool(idx, b[idx].astype(int), P[idx])


def leverage_rank(pool: CandidatePool, X_pool, state: IncrementalState):
    """Sort the pool by leverage, largest first (ties by pixel index).

    ``X_pool`` holds the normalized features of the pool's pixels. The weight
    of each candidate is taken from its DRF-assigned class.
    """
    if len(pool) == 0:
        pool.leverage = np.zeros(0)
        return pool
    sel = state.sel
    K_pot = kernel_matrix(X_pool, sel.X_V, sel.params)
    p_own = pool.probs[np.arange(len(pool)), pool.label - 1]
    lev = hat_diagonal(K_pot, klr.weights(p_own))
    if not np.all(np.isfinite(lev)):
        warnings.warn("leverage not finite; ranking by ascending max probability", RuntimeWarning)
        order = np.lexsort((pool.pixel, pool.probs.max(axis=1)))
        lev = np.zeros(len(pool))
    else:
        order = np.lexsort((pool.pixel, -lev))
    pool.leverage = lev
    return pool.take(order)


@dataclass
class Batch:
    X: np.ndarray
    y: np.ndarray
    pixel: np.ndarray
    provenance: list

    def __len__(self):
        return self.y.size

    def counts(self, n_classes):
        return np.bincount(self.y, minlength=n_classes + 1)[1:]


def balance(pool: CandidatePool, probs, ivm_labels, drf_labels, X_all, state: IncrementalState,
            config: AcquisitionConfig, rng, exclude=None):
    """Exactly ``per_class_quota`` samples per class.

    Order of preference: ranked disagreement candidates, agreement pixels by
    descending max probability, then noisy duplicates of existing rows.
    """
    q = config.per_class_quota
    P = np.asarray(probs, dtype=float)
    a = np.asarray(ivm_labels).ravel()
    b = np.asarray(drf_labels).ravel()
    blocked = np.zeros(a.size, dtype=bool)
    if exclude is not None and len(exclude):
        blocked[np.asarray(exclude, dtype=int)] = True
    blocked[pool.pixel] = True
    pmax = P.max(axis=1)
    scale = config.noise_sigma_fraction * np.maximum(state.sel.X.std(axis=0), 1e-12)
    Xs, ys, px, prov = [], [], [], []
    for k in range(1, state.n_classes + 1):
        mine = pool.pixel[pool.label == k][:q]
        Xs.append(X_all[mine])
        px.append(mine)
        prov += [DISAGREEMENT] * mine.size
        short = q - mine.size
        if short > 0:
            agree = np.flatnonzero((a == k) & (b == k) & ~blocked)
            agree = agree[np.lexsort((agree, -pmax[agree]))][:short]
            Xs.append(X_all[agree])
            px.append(agree)
            prov += [AGREEMENT] * agree.size
            short -= agree.size
        if short > 0:
            rows = np.flatnonzero(state.y == k)
            if rows.size == 0:
                raise DataError(f"class {k} has no training rows to oversample")
            pick = rows[rng.integers(0, rows.size, size=short)]
            Xs.append(state.sel.X[pick] + rng.normal(size=(short, scale.size)) * scale)
            px.append(np.full(short, -1))
            prov += [OVERSAMPLED] * short
        ys.append(np.full(q, k))
    return Batch(np.vstack(Xs), np.concatenate(ys), np.concatenate(px).astype(int), prov)


@dataclass
class IterationRecord:
    iteration: int
    added: int
    pruned: int
    n_train: int
    n_iv: int
    q: float
    oa: float = float("nan")
    aa: float = float("nan")
    kappa: float = float("nan")
    pool: int = 0
    provenance: dict = field(default_factory=dict)

    def row(self):
        return [self.iteration, self.added, self.pruned, self.n_train, self.n_iv,
                repr(float(self.q)), repr(float(self.oa)), repr(float(self.aa)), repr(float(self.kappa))]


class ReportWriter:
    """CSV report flushed after every row."""

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(REPORT_COLUMNS)
        self._fh.flush()

    def __call__(self, rec: IterationRecord):
        self._w.writerow(rec.row())
        self._fh.flush()

    def close(self):
        self._fh.close()


class SelfTrainingAborted(RuntimeError):
    """An iteration failed; ``state`` and ``report`` hold the last consistent result."""

    def __init__(self, msg, state, report):
        super().__init__(msg)
        self.state = state
        self.report = report


def _score(state, X_all, truth):
    P = state.model().predict_proba(X_all)
    labels = np.argmax(P, axis=1) + 1
    if truth is None:
        return P, labels, (np.nan, np.nan, np.nan)
    t = np.asarray(truth).ravel()
    ref = t > 0
    s, _ = metrics.summarize(t[ref], labels[ref], state.n_classes)
    return P, labels, (s.oa, s.aa, s.kappa)


def _iterate(state, X_all, shape, config, truth, it):
    H, W = shape
    K = state.n_classes
    P, ivm_labels, _ = _score(state, X_all, None)
    drf_labels = drf.smooth(P.reshape(H, W, K), config.beta, config.connectivity).ravel()
    used = state.pixel[state.pixel >= 0]
    pool = acquire(P, ivm_labels, drf_labels, config, exclude=used)
    if len(pool) == 0:
        return None, 0
    pool = leverage_rank(pool, X_all[pool.pixel], state)
    rng = np.random.default_rng([config.seed, it])
    batch = balance(pool, P, ivm_labels, drf_labels, X_all, state, config, rng, exclude=used)
    state.iteration = it
    add_samples(state, batch.X, batch.y, origin=batch.provenance, pixel=batch.pixel)
    pruned = 0
    if config.prune_every_iteration:
        state, pruned = prune(state, limit=config.prune_limit)
    refresh_import_vectors(state, config.probe, max_iv=config.max_iv, seed=config.seed + it)
    _, _, (oa, aa, kappa) = _score(state, X_all, truth)
    prov = {p: batch.provenance.count(p) for p in (DISAGREEMENT, AGREEMENT, OVERSAMPLED)}
    rec = IterationRecord(it, len(batch), pruned, state.N, state.V, state.Q, oa, aa, kappa,
                          pool=len(pool), provenance=prov)
    return rec, prov[OVERSAMPLED] == len(batch)


def run(state: IncrementalState, cube, config: AcquisitionConfig, truth=None, on_record=None):
    """Self-train ``state`` on a normalized (H, W, B) cube.

    Returns ``(state, report)``; the report starts with an iteration-0 row
    describing the incoming model. ``truth`` (0 = unknown) only feeds the
    report metrics, never the acquired labels. ``on_record`` is called with
    every report row as soon as it is produced.
    """
    cube = np.asarray(cube, dtype=float)
    H, W, B = cube.shape
    X_all = cube.reshape(-1, B)
    emit = on_record or (lambda rec: None)
    _, _, (oa, aa, kappa) = _score(state, X_all, truth)
    report = [IterationRecord(0, 0, 0, state.N, state.V, state.Q, oa, aa, kappa)]
    emit(report[0])
    oversample_only = 0
    for it in range(1, config.max_iterations + 1):
        work = state.copy()
        try:
            rec, only_dup = _iterate(work, X_all, (H, W), config, truth, it)
        except Exception as exc:
            raise SelfTrainingAborted(f"iteration {it} failed: {exc}", state, report) from exc
        if rec is None:
            log.info("iteration %d: no candidates left", it)
            break
        state = work
        report.append(rec)
        emit(rec)
        log.info("iteration %d: pool %d, added %d, pruned %d, N=%d, V=%d, Q=%.6g",
                 it, rec.pool, rec.added, rec.pruned, rec.n_train, rec.n_iv, rec.q)
        oversample_only = oversample_only + 1 if only_dup else 0
        if oversample_only >= 2:
            log.info("two oversample-only batches in a row; stopping")
            break
    return state, report
