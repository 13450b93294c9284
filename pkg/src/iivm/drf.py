"""Potts-model discriminative random field on the pixel lattice.

Energy of a labeling ``y``::

    E(y) = sum_j U[j, y_j] - beta * #{neighbour pairs with y_j == y_m}

with unaries ``U = -log p(y_j | x_j)``. Inference minimizes the equivalent
non-negative Potts form (cost ``beta`` per dissimilar pair, which differs from
E by the constant ``beta * |edges|``): a single min-cut for two classes, and
alpha-expansion moves otherwise.

Labels are 1..K throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import breadth_first_order, maximum_flow

CAPACITY_SCALE = 1e6
_INT_MAX = np.iinfo(np.int32).max
MAX_SWEEPS = 20
P_FLOOR = 1e-12


@dataclass
class LatticeProblem:
    """Unary field (H, W, K) of non-negative costs, Potts weight and neighbourhood."""

    unary: np.ndarray
    beta: float = 1.0
    connectivity: int = 4

    def __post_init__(self):
        self.unary = np.asarray(self.unary, dtype=float)
        if self.unary.ndim != 3 or self.unary.shape[2] < 1:
            raise ValueError("unary must be an (H, W, K) array")
        if not np.all(np.isfinite(self.unary)) or self.unary.min() < 0:
            raise ValueError("unary costs must be finite and non-negative")
        if not self.beta >= 0:
            raise ValueError("beta must be non-negative")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")

    @classmethod
    def from_probabilities(cls, probs, beta=1.0, connectivity=4):
        """Build from an (H, W, K) probability field; probabilities are floored."""
        P = np.clip(np.asarray(probs, dtype=float), P_FLOOR, 1.0)
        return cls(-np.log(P), beta, connectivity)

    @property
    def shape(self):
        return self.unary.shape[:2]

    @property
    def n_labels(self):
        return self.unary.shape[2]

    def edges(self):
        return lattice_edges(*self.shape, self.connectivity)


def lattice_edges(height, width, connectivity=4):
    """Unordered neighbour pairs as an (E, 2) array of flat pixel indices."""
    idx = np.arange(height * width).reshape(height, width)
    pairs = [
        (idx[:, :-1], idx[:, 1:]),
        (idx[:-1, :], idx[1:, :]),
    ]
    if connectivity == 8:
        pairs += [(idx[:-1, :-1], idx[1:, 1:]), (idx[:-1, 1:], idx[1:, :-1])]
    return np.concatenate([np.stack([a.ravel(), b.ravel()], axis=1) for a, b in pairs])


def energy(problem: LatticeProblem, labels) -> float:
    """Energy in the reward convention: unaries minus beta per equal pair."""
    labels = np.asarray(labels)
    if labels.shape != problem.shape:
        raise ValueError(f"labeling shape {labels.shape} != lattice {problem.shape}")
    flat = labels.ravel().astype(int)
    K = problem.n_labels
    if flat.min() < 1 or flat.max() > K:
        raise ValueError(f"labels must lie in 1..{K}")
    U = problem.unary.reshape(-1, K)
    e = problem.edges()
    same = np.count_nonzero(flat[e[:, 0]] == flat[e[:, 1]])
    return float(U[np.arange(flat.size), flat - 1].sum() - problem.beta * same)


def max_flow(n_nodes, edges, capacities, source, sink):
    """Maximum s-t flow with integer capacities.

    ``edges`` is an (E, 2) array of directed arcs. Returns ``(value, side)``
    where ``side[v]`` is True for nodes on the source side of a minimum cut.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    cap = np.asarray(capacities, dtype=np.int64).ravel()
    if cap.size and cap.min() < 0:
        raise ValueError("capacities must be non-negative")
    if cap.size and cap.max() > _INT_MAX:
        raise ValueError("capacity exceeds 32-bit range")
    keep = (cap > 0) & (edges[:, 0] != edges[:, 1])
    edges, cap = edges[keep], cap[keep]
    side = np.zeros(n_nodes, dtype=bool)
    side[source] = True
    if cap.size == 0:
        return 0, side
    G = sparse.coo_matrix((cap, (edges[:, 0], edges[:, 1])), shape=(n_nodes, n_nodes)).tocsr()
    G.sum_duplicates()
    if G.data.max() > _INT_MAX:
        raise ValueError("merged capacity exceeds 32-bit range")
    G = G.astype(np.int32)
    res = maximum_flow(G, source, sink, method="dinic")
    F = res.flow.tocsr()
    # residual graph: forward slack plus reverse of positive flow
    resid = (G.astype(np.int64) - F.astype(np.int64)).tocsr()
    resid.data = np.maximum(resid.data, 0)
    resid.eliminate_zeros()
    reached = breadth_first_order(resid, source, directed=True, return_predecessors=False)
    side[:] = False
    side[reached] = True
    return int(res.flow_value), side


def _cut_graph(unary0, unary1, pairs, pair_costs):
    """s-t graph for a binary submodular energy.

    x_v = 1 (sink side) costs unary1[v], x_v = 0 costs unary0[v]. Each entry of
    ``pair_costs`` is (E00, E01, E10, E11) for the pair (p, q).
    Returns float arcs and capacities plus the energy constant.
    """
    n = unary0.size
    s, t = n, n + 1
    lin = unary1 - unary0
    const = float(unary0.sum())
    A, B, C, D = pair_costs
    p, q = pairs[:, 0], pairs[:, 1]
    const += float(A.sum())
    # E = A + (C - A) x_p + (D - C) x_q + (B + C - A - D)(1 - x_p) x_q
    np.add.at(lin, p, C - A)
    np.add.at(lin, q, D - C)
    w = B + C - A - D
    w = np.maximum(w, 0.0)
    # linear term c * x_v: c > 0 -> arc s->v (paid when v on sink side);
    # c < 0 -> arc v->t with -c and constant c
    pos = lin > 0
    arcs = [np.stack([np.full(pos.sum(), s), np.flatnonzero(pos)], 1),
            np.stack([np.flatnonzero(~pos), np.full((~pos).sum(), t)], 1),
            np.stack([p, q], 1)]
    caps = [lin[pos], -lin[~pos], w]
    const += float(lin[~pos].sum())
    return np.concatenate(arcs), np.concatenate(caps), const, s, t


def _solve_binary(unary0, unary1, pairs, pair_costs):
    arcs, caps, const, s, t = _cut_graph(unary0, unary1, pairs, pair_costs)
    top = caps.max() if caps.size else 0.0
    # fixed-point capacities; shrink the scale if the largest arc would overflow
    scale = CAPACITY_SCALE
    if top * scale * 4 > _INT_MAX:
        scale = _INT_MAX / (4 * top)
    icap = np.rint(caps * scale).astype(np.int64)
    _, side = max_flow(unary0.size + 2, arcs, icap, s, t)
    return ~side[: unary0.size]  # True = sink side = x_v = 1


def _potts(a, b, beta):
    return np.where(a != b, beta, 0.0)


def _binary_min(problem: LatticeProblem):
    U = problem.unary.reshape(-1, 2)
    e = problem.edges()
    b = problem.beta
    m = e.shape[0]
    costs = (np.zeros(m), np.full(m, b), np.full(m, b), np.zeros(m))
    x = _solve_binary(U[:, 0], U[:, 1], e, costs)
    return x.astype(int) + 1


def _expand(flat, alpha, U, e, beta):
    """Optimal alpha-expansion move from labeling ``flat`` (0-based)."""
    keep_cost = U[np.arange(flat.size), flat]
    switch_cost = U[:, alpha].copy()
    p, q = e[:, 0], e[:, 1]
    fp, fq = flat[p], flat[q]
    costs = (_potts(fp, fq, beta), _potts(fp, alpha, beta),
             _potts(alpha, fq, beta), np.zeros(p.size))
    x = _solve_binary(keep_cost, switch_cost, e, costs)
    out = flat.copy()
    out[x] = alpha
    return out


def _expansion_descent(problem, U, e, flat):
    H, W = problem.shape
    K = problem.n_labels
    best = energy(problem, (flat + 1).reshape(H, W))
    for _ in range(MAX_SWEEPS * K):
        # best-improvement schedule: commit the single best expansion per round
        move, move_e = None, best - 1e-9 * max(1.0, abs(best))
        for alpha in range(K):
            cand = _expand(flat, alpha, U, e, problem.beta)
            en = energy(problem, (cand + 1).reshape(H, W))
            if en < move_e:
                move, move_e = cand, en
        if move is None:
            break
        flat, best = move, move_e
    return flat, best


def infer(problem: LatticeProblem, init=None, restarts=True):
    """MAP labeling (H, W) with labels 1..K.

    Two labels are solved exactly by one min-cut. More labels use
    alpha-expansion: each round computes the optimal expansion move for every
    label and commits the one with the lowest energy, until no move lowers the
    energy. The descent starts from ``init`` (default: the per-pixel unary
    minimum) and, with ``restarts``, additionally from every constant
    labeling; the lowest-energy result wins, ties to the first start.
    """
    H, W = problem.shape
    K = problem.n_labels
    U = problem.unary.reshape(-1, K)
    if K == 1:
        return np.ones((H, W), dtype=int)
    argmin = np.argmin(U, axis=1)
    if problem.beta == 0 and init is None:
        return (argmin + 1).reshape(H, W)
    if K == 2 and init is None:
        lab = _binary_min(problem).reshape(H, W)
        if energy(problem, lab) > energy(problem, (argmin + 1).reshape(H, W)):
            lab = (argmin + 1).reshape(H, W)  # guards fixed-point rounding only
        return lab
    e = problem.edges()
    starts = [argmin if init is None else np.asarray(init).ravel().astype(int) - 1]
    if restarts:
        starts += [np.full(H * W, k) for k in range(K)]
    best_flat, best_e = None, np.inf
    for flat in starts:
        flat, en = _expansion_descent(problem, U, e, flat)
        if en < best_e:
            best_flat, best_e = flat, en
    return (best_flat + 1).reshape(H, W)


def smooth(probs, beta, connectivity=4):
    """Convenience: DRF labeling of an (H, W, K) probability field."""
    return infer(LatticeProblem.from_probabilities(probs, beta, connectivity))
