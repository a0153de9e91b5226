"""Expert selection: per-expert scores and top-n selection.

Four strategies: groundtruth (count of positive neurons per expert, an
oracle over the full pre-activation), random center and parameter center
(cosine similarity of the input against a representative W1 column), and
a learnable two-layer tanh router trained to predict the positive-neuron
counts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .ffn import FfnWeights
from .profiling import ActivationTrace
from .splitters import ExpertPartition, ExpertWeights, materialize_experts


class TrainingError(RuntimeError):
    pass


def select_top_n(scores: np.ndarray, n: int) -> np.ndarray:
    """Indices of the n highest scores, ascending; ties favor lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    k = scores.size
    if not (1 <= n <= k):
        raise ValueError(f"budget n={n} must satisfy 1 <= n <= k={k}")
    order = np.lexsort((np.arange(k), -scores))
    return np.sort(order[:n])


def score_groundtruth(h: np.ndarray, p: ExpertPartition) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.size != p.d_ff:
        raise ValueError("pre-activation length does not match the partition")
    return np.bincount(p.assignment, weights=(h > 0).astype(np.float64),
                       minlength=p.k)


def _cosine_scores(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Cosine of x against each row of `centers`; zero vectors score 0."""
    x = np.asarray(x, dtype=np.float64)
    xn = np.linalg.norm(x)
    cn = np.linalg.norm(centers, axis=1)
    denom = xn * cn
    out = np.zeros(centers.shape[0])
    ok = denom > 0
    out[ok] = (centers[ok] @ x) / denom[ok]
    return out


def expert_mean_centers(e: ExpertWeights) -> np.ndarray:
    return np.stack([e.w1_block(i).mean(axis=1) for i in range(e.k)])


def expert_first_column_centers(e: ExpertWeights) -> np.ndarray:
    return np.stack([e.w1_block(i)[:, 0] for i in range(e.k)])


def score_param_center(x: np.ndarray, e: ExpertWeights) -> np.ndarray:
    return _cosine_scores(x, expert_mean_centers(e))


def score_random_center(x: np.ndarray, e: ExpertWeights) -> np.ndarray:
    return _cosine_scores(x, expert_first_column_centers(e))


# --------------------------------------------------------------------------
# learnable router

@dataclass
class LearnableRouterParams:
    w1: np.ndarray  # (d_model, k)
    b1: np.ndarray  # (k,)
    w2: np.ndarray  # (k, k)
    b2: np.ndarray  # (k,)
    train_loss: list = field(default_factory=list)
    dev_loss: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.b2.size


def score_learnable(x: np.ndarray, r: LearnableRouterParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.tanh(x @ r.w1 + r.b1) @ r.w2 + r.b2


def count_targets(t: ActivationTrace, p: ExpertPartition) -> np.ndarray:
    """Per-sample positive-neuron counts per expert, (samples, k)."""
    pos = (t.h_values > 0).astype(np.float64)
    onehot = np.eye(p.k)[p.assignment]
    return pos @ onehot


def _normalize_counts(counts: np.ndarray) -> np.ndarray:
    """Counts to distributions; all-zero rows become uniform."""
    k = counts.shape[1]
    totals = counts.sum(axis=1, keepdims=True)
    q = np.where(totals > 0, counts / np.maximum(totals, 1e-300), 1.0 / k)
    return q


def router_loss_and_grads(r: LearnableRouterParams, x: np.ndarray, q: np.ndarray):
    """Softmax cross-entropy of router logits against target distributions."""
    z1 = x @ r.w1 + r.b1
    a1 = np.tanh(z1)
    logits = a1 @ r.w2 + r.b2
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = x.shape[0]
    loss = float(-np.sum(q * logp) / n)
    dlogits = (np.exp(logp) - q) / n
    dw2 = a1.T @ dlogits
    db2 = dlogits.sum(axis=0)
    da1 = dlogits @ r.w2.T
    dz1 = da1 * (1.0 - a1 * a1)
    dw1 = x.T @ dz1
    db1 = dz1.sum(axis=0)
    return loss, {"dw1": dw1, "db1": db1, "dw2": dw2, "db2": db2}


def init_router(d_model: int, k: int, seed: int) -> LearnableRouterParams:
    rng = np.random.default_rng(seed)
    return LearnableRouterParams(
        w1=rng.normal(size=(d_model, k)) / np.sqrt(d_model),
        b1=np.zeros(k),
        w2=rng.normal(size=(k, k)) / np.sqrt(k),
        b2=np.zeros(k),
    )


def train_learnable_router(w: FfnWeights, p: ExpertPartition, t: ActivationTrace,
                           inputs: np.ndarray, lr: float = 1e-2, epochs: int = 30,
                           batch: int = 512, seed: int = 0,
                           split_ratio: float = 0.9) -> LearnableRouterParams:
    """Adam on softmax cross-entropy against normalized positive counts.

    `inputs` are the representations the trace was recorded on, in the
    same order. The tail (1 - split_ratio) of a seeded shuffle is held
    out as the dev split.
    """
    if lr <= 0:
        raise ValueError("lr must be > 0")
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.shape[0] != t.samples:
        raise ValueError("trace and inputs disagree on sample count")
    q = _normalize_counts(count_targets(t, p))
    rng = np.random.default_rng(seed)
    order = rng.permutation(t.samples)
    n_train = max(1, int(round(t.samples * split_ratio)))
    tr, dev = order[:n_train], order[n_train:]
    if dev.size == 0:
        dev = tr
    r = init_router(w.d_model, p.k, seed)
    params = [r.w1, r.b1, r.w2, r.b2]
    m = [np.zeros_like(a) for a in params]
    v = [np.zeros_like(a) for a in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    dev_loss0, _ = router_loss_and_grads(r, inputs[dev], q[dev])
    r.dev_loss.append(dev_loss0)
    for epoch in range(epochs):
        perm = rng.permutation(n_train)
        epoch_loss = 0.0
        for start in range(0, n_train, batch):
            idx = tr[perm[start:start + batch]]
            loss, g = router_loss_and_grads(r, inputs[idx], q[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"router loss diverged at epoch {epoch}")
            epoch_loss += loss * idx.size
            grads = [g["dw1"], g["db1"], g["dw2"], g["db2"]]
            step += 1
            for j, (a, grad) in enumerate(zip(params, grads)):
                m[j] = beta1 * m[j] + (1 - beta1) * grad
                v[j] = beta2 * v[j] + (1 - beta2) * grad * grad
                mh = m[j] / (1 - beta1 ** step)
                vh = v[j] / (1 - beta2 ** step)
                a -= lr * mh / (np.sqrt(vh) + eps)
        r.train_loss.append(epoch_loss / n_train)
        dev_loss, _ = router_loss_and_grads(r, inputs[dev], q[dev])
        r.dev_loss.append(dev_loss)
    return r


# --------------------------------------------------------------------------
# estimator wrappers; each scores a single input and can batch-score

class RouterBase(BaseEstimator):
    needs_h = False

    def scores(self, x: np.ndarray, h: np.ndarray | None = None) -> np.ndarray:
        raise NotImplementedError

    def scores_batch(self, x: np.ndarray, h: np.ndarray | None = None) -> np.ndarray:
        rows = range(x.shape[0])
        return np.stack([self.scores(x[i], None if h is None else h[i]) for i in rows])

    def select(self, x: np.ndarray, n: int, h: np.ndarray | None = None) -> np.ndarray:
        return select_top_n(self.scores(x, h), n)


class GroundtruthRouter(RouterBase):
    """Oracle: needs the full pre-activation h of each input."""

    needs_h = True

    def fit(self, ffn: FfnWeights, partition: ExpertPartition, **_):
        self.partition_ = partition
        return self

    def scores(self, x, h=None):
        if h is None:
            raise ValueError("groundtruth routing requires the pre-activation h")
        return score_groundtruth(h, self.partition_)

    def scores_batch(self, x, h=None):
        if h is None:
            raise ValueError("groundtruth routing requires pre-activations")
        onehot = np.eye(self.partition_.k)[self.partition_.assignment]
        return (h > 0).astype(np.float64) @ onehot


class _CenterRouter(RouterBase):
    _center_fn = None

    def fit(self, ffn: FfnWeights, partition: ExpertPartition, **_):
        self.partition_ = partition
        self.centers_ = type(self)._center_fn(materialize_experts(ffn, partition))
        return self

    def scores(self, x, h=None):
        return _cosine_scores(np.asarray(x, dtype=np.float64), self.centers_)

    def scores_batch(self, x, h=None):
        x = np.asarray(x, dtype=np.float64)
        denom = np.linalg.norm(x, axis=1)[:, None] * np.linalg.norm(self.centers_, axis=1)[None, :]
        out = np.zeros((x.shape[0], self.centers_.shape[0]))
        ok = denom > 0
        raw = x @ self.centers_.T
        out[ok] = raw[ok] / denom[ok]
        return out


class ParamCenterRouter(_CenterRouter):
    _center_fn = staticmethod(expert_mean_centers)


class RandomCenterRouter(_CenterRouter):
    _center_fn = staticmethod(expert_first_column_centers)


class LearnableRouter(RouterBase):
    def __init__(self, lr: float = 1e-2, epochs: int = 30, batch: int = 512,
                 seed: int = 0):
        self.lr = lr
        self.epochs = epochs
        self.batch = batch
        self.seed = seed

    def fit(self, ffn: FfnWeights, partition: ExpertPartition,
            trace: ActivationTrace = None, inputs: np.ndarray = None, **_):
        if trace is None or inputs is None:
            raise ValueError("learnable router needs a trace and its inputs")
        self.partition_ = partition
        self.params_ = train_learnable_router(
            ffn, partition, trace, inputs,
            lr=self.lr, epochs=self.epochs, batch=self.batch, seed=self.seed)
        return self

    def scores(self, x, h=None):
        return score_learnable(np.asarray(x, dtype=np.float64), self.params_)

    def scores_batch(self, x, h=None):
        return score_learnable(np.asarray(x, dtype=np.float64), self.params_)


ROUTERS = {
    "gt": GroundtruthRouter,
    "random": RandomCenterRouter,
    "param": ParamCenterRouter,
    "learn": LearnableRouter,
}


# --------------------------------------------------------------------------
# router persistence: JSON header, f64 payloads hex-encoded little-endian

def _enc(a: np.ndarray) -> dict:
    return {"shape": list(a.shape),
            "data": np.ascontiguousarray(a, dtype="<f8").tobytes().hex()}


def _dec(obj: dict) -> np.ndarray:
    return np.frombuffer(bytes.fromhex(obj["data"]), dtype="<f8").reshape(obj["shape"]).copy()


def save_router(path, router: RouterBase) -> None:
    kind = {v: n for n, v in ROUTERS.items()}[type(router)]
    doc = {"type": kind, "k": int(router.partition_.k)}
    if isinstance(router, GroundtruthRouter):
        pass
    elif isinstance(router, _CenterRouter):
        doc["centers"] = _enc(router.centers_)
    elif isinstance(router, LearnableRouter):
        p = router.params_
        doc["seed"] = router.seed
        doc["params"] = {n: _enc(getattr(p, n)) for n in ("w1", "b1", "w2", "b2")}
        doc["d_model"] = int(p.w1.shape[0])
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_router(path, partition: ExpertPartition) -> RouterBase:
    with open(path) as fh:
        doc = json.load(fh)
    kind = doc["type"]
    if doc["k"] != partition.k:
        raise ValueError("router k does not match partition k")
    router = ROUTERS[kind]() if kind != "learn" else LearnableRouter(seed=doc.get("seed", 0))
    router.partition_ = partition
    if kind in ("random", "param"):
        router.centers_ = _dec(doc["centers"])
    elif kind == "learn":
        p = doc["params"]
        router.params_ = LearnableRouterParams(
            w1=_dec(p["w1"]), b1=_dec(p["b1"]), w2=_dec(p["w2"]), b2=_dec(p["b2"]))
    return router
