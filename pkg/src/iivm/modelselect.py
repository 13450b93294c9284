"""Cross-validated choice of kernel width, regularization and Potts weight.

Scores are held-out overall accuracy. Kernel hyperparameters use stratified
k-fold splits of the training rows; the Potts weight uses spatially blocked
folds so held-out pixels do not share neighbourhoods with training pixels.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import drf, ivm
from .errors import ConfigError
from .kernel import KernelParams

log = logging.getLogger(__name__)

DEFAULT_GAMMAS = tuple(2.0 ** e for e in range(-8, 3))
DEFAULT_LAMBDAS = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
DEFAULT_BETAS = (0.0, 0.25, 0.5, 1.0, 2.0, 4.0)


class FoldSkipped(UserWarning):
    pass


@dataclass
class CvPlan:
    k: int = 5
    gammas: tuple = DEFAULT_GAMMAS
    lambdas: tuple = DEFAULT_LAMBDAS
    betas: tuple = DEFAULT_BETAS
    seed: int = 0
    tile: int = 8
    train_kw: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError("fold count k must be >= 2")
        for name in ("gammas", "lambdas", "betas"):
            if len(getattr(self, name)) == 0:
                raise ConfigError(f"{name} grid is empty")
        if any(g <= 0 for g in self.gammas) or any(l <= 0 for l in self.lambdas):
            raise ConfigError("gamma and lambda must be positive")
        if any(b < 0 for b in self.betas):
            raise ConfigError("beta must be non-negative")


def kfold_split(n, k, labels=None, seed=0):
    """Fold id per sample; stratified round-robin after a seeded shuffle.

    The round-robin offset carries over from one class to the next so overall
    fold sizes stay balanced as well.
    """
    if k < 2 or k > n:
        raise ValueError(f"need 2 <= k <= N, got k={k}, N={n}")
    labels = np.zeros(n, dtype=int) if labels is None else np.asarray(labels)
    rng = np.random.default_rng(seed)
    folds = np.empty(n, dtype=int)
    offset = 0
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        folds[members] = (offset + np.arange(members.size)) % k
        offset = (offset + members.size) % k
    return folds


def _cv_score(X, y, folds, params, lam, n_classes, train_kw):
    scores = []
    for f in np.unique(folds):
        tr, te = folds != f, folds == f
        if np.unique(y[tr]).size < n_classes:
            warnings.warn(f"fold {f} lacks a class in its training part; skipped", FoldSkipped)
            scores.append(np.nan)
            continue
        model = ivm.train(X[tr], y[tr], params, lam, n_classes=n_classes, **train_kw)
        scores.append(float(np.mean(model.predict(X[te]) == y[te])))
    return scores


def grid_search(X, y, plan: CvPlan, n_classes=None, table_path=None):
    """Best (gamma, lambda) by mean held-out OA.

    Ties go to the larger lambda, then the larger gamma. Returns
    ``(gamma, lam, table)`` with one row ``(gamma, lam, fold, oa)`` per
    evaluated fold.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    n_classes = int(y.max()) if n_classes is None else n_classes
    folds = kfold_split(y.size, plan.k, y, plan.seed)
    table, best, best_key = [], None, None
    for gamma in plan.gammas:
        for lam in plan.lambdas:
            scores = _cv_score(X, y, folds, KernelParams(float(gamma)), float(lam), n_classes,
                               plan.train_kw)
            table += [(float(gamma), float(lam), f, s) for f, s in enumerate(scores)]
            valid = [s for s in scores if not np.isnan(s)]
            if not valid:
                continue
            key = (float(np.mean(valid)), float(lam), float(gamma))
            log.debug("gamma=%g lambda=%g oa=%.4f", gamma, lam, key[0])
            if best_key is None or key > best_key:
                best, best_key = (float(gamma), float(lam)), key
    if best is None:
        raise ConfigError("every cross-validation fold was skipped")
    if table_path is not None:
        write_cv_table(table_path, table, ("gamma", "lambda", "fold", "oa"))
    return best[0], best[1], table


def spatial_folds(height, width, k, tile=8):
    """Fold id per pixel from a tiling: tile (i, j) goes to fold (i + j) mod k."""
    ii, jj = np.mgrid[0:height, 0:width]
    return ((ii // tile) + (jj // tile)) % k


def select_beta(cube, labels, params, lam, plan: CvPlan, class_names=None, table_path=None,
                connectivity=4):
    """Potts weight with the best held-out DRF accuracy on spatial folds.

    ``cube`` holds normalized features (H, W, B); ``labels`` marks the
    reference pixels (0 = unlabeled). For each fold a model is trained on
    the other folds' labeled pixels, the DRF is run on the whole lattice and
    scored on the fold's pixels. Ties go to the smaller beta. Returns
    ``(beta, table)`` with rows ``(beta, fold, oa)``.
    """
    cube = np.asarray(cube, dtype=float)
    labels = np.asarray(labels, dtype=int)
    H, W, B = cube.shape
    n_classes = len(class_names) if class_names else int(labels.max())
    folds = spatial_folds(H, W, plan.k, plan.tile)
    flat_l, flat_f = labels.ravel(), folds.ravel()
    X_all = cube.reshape(-1, B)
    table, per_beta = [], {float(b): [] for b in plan.betas}
    for f in range(plan.k):
        tr = (flat_l > 0) & (flat_f != f)
        te = (flat_l > 0) & (flat_f == f)
        if not te.any() or np.unique(flat_l[tr]).size < n_classes:
            warnings.warn(f"spatial fold {f} unusable; skipped", FoldSkipped)
            continue
        model = ivm.train(X_all[tr], flat_l[tr], params, lam, n_classes=n_classes, **plan.train_kw)
        P = model.predict_proba(X_all).reshape(H, W, n_classes)
        for beta in per_beta:
            lab = drf.smooth(P, beta, connectivity).ravel()
            oa = float(np.mean(lab[te] == flat_l[te]))
            per_beta[beta].append(oa)
            table.append((beta, f, oa))
    if not table:
        raise ConfigError("every spatial fold was skipped")
    best = max(per_beta, key=lambda b: (np.mean(per_beta[b]), -b))
    if table_path is not None:
        write_cv_table(table_path, table, ("beta", "fold", "oa"))
    return best, table


def write_cv_table(path, rows, header):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
