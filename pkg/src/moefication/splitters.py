"""Expert construction: assign each middle neuron to one of k equal-size
experts and materialize the per-expert weight blocks.

Three strategies: random (identity baseline / seeded shuffle), balanced
k-means over the columns of W1, and balanced partitioning of the neuron
co-activation graph (greedy seeding plus Kernighan-Lin style swaps).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .ffn import FfnWeights
from .profiling import ActivationTrace
from .validation import check_divides


@dataclass
class ExpertPartition:
    k: int
    assignment: np.ndarray  # (d_ff,) expert index in [0, k), exactly d_e per expert
    method: str = ""
    seed: int = 0
    quantile: float | None = None

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        self.d_e = check_divides(self.k, self.assignment.size)
        counts = np.bincount(self.assignment, minlength=self.k)
        if counts.min() < 0 or not np.all(counts == self.d_e):
            raise ValueError(f"experts must each hold exactly {self.d_e} neurons")

    @property
    def d_ff(self) -> int:
        return self.assignment.size

    @property
    def permutation(self) -> np.ndarray:
        """Target position of each neuron: experts laid out contiguously,
        members in ascending original index."""
        order = np.argsort(self.assignment, kind="stable")
        pos = np.empty(self.d_ff, dtype=np.int64)
        pos[order] = np.arange(self.d_ff)
        return pos

    def members(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == i)

    def to_json(self) -> str:
        return json.dumps(
            {
                "k": self.k,
                "d_e": self.d_e,
                "assignment": (self.assignment + 1).tolist(),
                "method": self.method,
                "seed": self.seed,
                "quantile": self.quantile,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ExpertPartition":
        obj = json.loads(text)
        return cls(
            k=obj["k"],
            assignment=np.asarray(obj["assignment"], dtype=np.int64) - 1,
            method=obj.get("method", ""),
            seed=obj.get("seed", 0),
            quantile=obj.get("quantile"),
        )


@dataclass
class ExpertWeights:
    """Per-expert views of the permuted FFN parameters.

    w1p is W1 with columns permuted so expert i owns columns
    [i*d_e, (i+1)*d_e); likewise b1p, and w2p rows.
    """

    w1p: np.ndarray
    b1p: np.ndarray
    w2p: np.ndarray
    b2: np.ndarray
    k: int
    d_e: int = field(init=False)

    def __post_init__(self):
        self.d_e = self.b1p.size // self.k

    def w1_block(self, i: int) -> np.ndarray:
        return self.w1p[:, i * self.d_e:(i + 1) * self.d_e]

    def b1_block(self, i: int) -> np.ndarray:
        return self.b1p[i * self.d_e:(i + 1) * self.d_e]

    def w2_block(self, i: int) -> np.ndarray:
        return self.w2p[i * self.d_e:(i + 1) * self.d_e, :]


def materialize_experts(w: FfnWeights, p: ExpertPartition) -> ExpertWeights:
    if p.d_ff != w.d_ff:
        raise ValueError(f"partition covers {p.d_ff} neurons, FFN has {w.d_ff}")
    order = np.argsort(p.permutation, kind="stable")  # original index at each slot
    return ExpertWeights(
        w1p=w.w1[:, order].copy(),
        b1p=w.b1[order].copy(),
        w2p=w.w2[order, :].copy(),
        b2=w.b2.copy(),
        k=p.k,
    )


# --------------------------------------------------------------------------
# random split

def split_random(d_ff: int, k: int, seed: int = 0) -> ExpertPartition:
    """seed 0 keeps neurons in order (identity permutation baseline);
    any other seed shuffles them into balanced groups."""
    d_e = check_divides(k, d_ff)
    assignment = np.repeat(np.arange(k), d_e)
    if seed != 0:
        assignment = np.random.default_rng(seed).permutation(assignment)
    return ExpertPartition(k=k, assignment=assignment, method="random", seed=seed)


# --------------------------------------------------------------------------
# balanced k-means over W1 columns

def _balanced_assign(points: np.ndarray, centers: np.ndarray, d_e: int) -> np.ndarray:
    """Fill clusters to capacity d_e by ascending (point, center) distance;
    ties resolve to the lower point index, then lower cluster index."""
    n, k = points.shape[0], centers.shape[0]
    dist = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assignment = np.full(n, -1, dtype=np.int64)
    remaining = np.full(k, d_e, dtype=np.int64)
    for flat in np.argsort(dist, axis=None, kind="stable"):
        p, c = divmod(int(flat), k)
        if assignment[p] == -1 and remaining[c] > 0:
            assignment[p] = c
            remaining[c] -= 1
    return assignment


def split_cluster(w: FfnWeights, k: int, seed: int = 0,
                  max_iter: int = 50) -> ExpertPartition:
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    d_e = check_divides(k, w.d_ff)
    points = w.w1.T.copy()  # one row per neuron
    rng = np.random.default_rng(seed)
    centers = points[rng.choice(w.d_ff, size=k, replace=False)]
    assignment = None
    for _ in range(max_iter):
        new_assignment = _balanced_assign(points, centers, d_e)
        if assignment is not None and np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        for c in range(k):
            centers[c] = points[assignment == c].mean(axis=0)
    return ExpertPartition(k=k, assignment=assignment, method="cluster", seed=seed)


# --------------------------------------------------------------------------
# co-activation graph split

@dataclass
class CoActivationGraph:
    weights: np.ndarray  # symmetric (d_ff, d_ff), zero diagonal, >= 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)

    @property
    def n_nodes(self) -> int:
        return self.weights.shape[0]

    def edges(self):
        iu, ju = np.nonzero(np.triu(self.weights, 1))
        return [(int(i), int(j), float(self.weights[i, j])) for i, j in zip(iu, ju)]


def build_coactivation_graph(t: ActivationTrace, quantile: float = 0.8) -> CoActivationGraph:
    """Edge weight (n, m) sums h_n * h_m over samples where both are
    positive; edges below the given quantile of the nonzero weights are
    dropped. Zero-weight pairs are excluded from the quantile."""
    if not (0.0 <= quantile < 1.0):
        raise ValueError("quantile must lie in [0, 1)")
    if t.samples < 1:
        raise ValueError("cannot build a co-activation graph from an empty trace")
    hp = np.maximum(t.h_values, 0.0)
    w = hp.T @ hp
    np.fill_diagonal(w, 0.0)
    nonzero = w[np.triu_indices_from(w, 1)]
    nonzero = nonzero[nonzero > 0]
    if nonzero.size and quantile > 0:
        cutoff = np.quantile(nonzero, quantile)
        w[w < cutoff] = 0.0
    return CoActivationGraph(w)


def intra_weight(w: np.ndarray, assignment: np.ndarray) -> float:
    """Total edge weight kept inside groups (each undirected edge once)."""
    same = assignment[:, None] == assignment[None, :]
    return float(np.sum(w * same) / 2.0)


def cut_weight(w: np.ndarray, assignment: np.ndarray) -> float:
    return float(np.sum(w) / 2.0 - intra_weight(w, assignment))


def _greedy_seed(w: np.ndarray, k: int, d_e: int) -> np.ndarray:
    n = w.shape[0]
    degree = w.sum(axis=0)
    order = np.lexsort((np.arange(n), -degree))
    assignment = np.full(n, -1, dtype=np.int64)
    remaining = np.full(k, d_e, dtype=np.int64)
    group_affinity = np.zeros((n, k))
    for u in order:
        scores = np.where(remaining > 0, group_affinity[u], -np.inf)
        g = int(np.argmax(scores))  # argmax takes the lowest index on ties
        assignment[u] = g
        remaining[g] -= 1
        group_affinity[:, g] += w[:, u]
    return assignment


def _kl_refine(w: np.ndarray, assignment: np.ndarray, max_swaps: int | None = None):
    """Pairwise-swap hill climbing on intra-group weight. Returns the
    refined assignment and the per-swap intra-weight history."""
    n = w.shape[0]
    if max_swaps is None:
        max_swaps = 8 * n
    grp = assignment.copy()
    s = np.zeros((n, int(grp.max()) + 1))
    for g in range(s.shape[1]):
        s[:, g] = w[:, grp == g].sum(axis=1)
    history = [intra_weight(w, grp)]
    for _ in range(max_swaps):
        sg = s[:, grp]                      # sg[u, v] = w(u, group of v)
        own = s[np.arange(n), grp]
        gain = sg + sg.T - own[:, None] - own[None, :] - 2.0 * w
        gain[grp[:, None] == grp[None, :]] = -np.inf
        u, v = divmod(int(np.argmax(gain)), n)
        if gain[u, v] <= 1e-12:
            break
        a, b = grp[u], grp[v]
        grp[u], grp[v] = b, a
        s[:, a] += w[:, v] - w[:, u]
        s[:, b] += w[:, u] - w[:, v]
        history.append(history[-1] + gain[u, v])
    return grp, history


def split_coactivation(g: CoActivationGraph, k: int, seed: int = 0,
                       restarts: int | None = None) -> ExpertPartition:
    """Balanced k-way partition maximizing intra-group co-activation.

    Best of a greedy-seeded start and `restarts` seeded random starts,
    each refined by pairwise swaps to a local optimum. Small graphs are
    cheap to refine, so they get more restarts by default.
    """
    d_e = check_divides(k, g.n_nodes)
    if restarts is None:
        restarts = 15 if g.n_nodes <= 64 else 3
    w = g.weights
    starts = [_greedy_seed(w, k, d_e)]
    rng = np.random.default_rng(seed)
    base = np.repeat(np.arange(k), d_e)
    for _ in range(restarts):
        starts.append(rng.permutation(base))
    best, best_score = None, -np.inf
    for start in starts:
        refined, history = _kl_refine(w, start)
        if history[-1] > best_score + 1e-12:
            best, best_score = refined, history[-1]
    return ExpertPartition(k=k, assignment=best, method="coact", seed=seed)


# --------------------------------------------------------------------------
# estimator wrappers

class RandomSplit(BaseEstimator):
    def __init__(self, k: int = 16, seed: int = 0):
        self.k = k
        self.seed = seed

    def fit(self, ffn: FfnWeights, trace: ActivationTrace | None = None):
        self.partition_ = split_random(ffn.d_ff, self.k, self.seed)
        return self


class ClusterSplit(BaseEstimator):
    def __init__(self, k: int = 16, seed: int = 0, max_iter: int = 50):
        self.k = k
        self.seed = seed
        self.max_iter = max_iter

    def fit(self, ffn: FfnWeights, trace: ActivationTrace | None = None):
        self.partition_ = split_cluster(ffn, self.k, self.seed, self.max_iter)
        return self


class CoactivationSplit(BaseEstimator):
    def __init__(self, k: int = 16, seed: int = 0, quantile: float = 0.8):
        self.k = k
        self.seed = seed
        self.quantile = quantile

    def fit(self, ffn: FfnWeights, trace: ActivationTrace | None = None):
        if trace is None:
            raise ValueError("co-activation split requires an activation trace")
        graph = build_coactivation_graph(trace, self.quantile)
        self.partition_ = split_coactivation(graph, self.k, self.seed)
        self.partition_.quantile = self.quantile
        return self


SPLITTERS = {"random": RandomSplit, "cluster": ClusterSplit, "coact": CoactivationSplit}
