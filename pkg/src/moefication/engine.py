"""Restricted mixture-of-experts forward pass, evaluation, and parameter
calibration (fine-tuning only the second layer).

The MoEfied output sums the selected experts' contributions unweighted
and adds b2 once; with every expert selected it reproduces the original
FFN output up to float addition order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ffn import FfnWeights, ffn_forward, relu
from .modelio import Dataset, TrainingError
from .routers import RouterBase
from .splitters import ExpertPartition, ExpertWeights, materialize_experts


@dataclass
class MoefiedFfn:
    experts: ExpertWeights
    partition: ExpertPartition
    router: RouterBase
    n: int  # selection budget, experts used per input

    def __post_init__(self):
        if not (1 <= self.n <= self.partition.k):
            raise ValueError(f"budget n={self.n} must lie in [1, k={self.partition.k}]")
        if self.experts.k != self.partition.k:
            raise ValueError("experts and partition disagree on k")

    @property
    def k(self) -> int:
        return self.partition.k

    @property
    def flop_ratio(self) -> float:
        return self.n / self.k

    def preactivation(self, x: np.ndarray) -> np.ndarray:
        """h in original neuron order, single input or batch."""
        h_perm = np.asarray(x, dtype=np.float64) @ self.experts.w1p + self.experts.b1p
        return h_perm[..., self.partition.permutation]

    def forward(self, x: np.ndarray):
        """One input -> (output, selected expert set)."""
        y, sel = self.forward_batch(np.asarray(x, dtype=np.float64)[None, :])
        return y[0], sel[0]

    def forward_batch(self, x: np.ndarray):
        """Batch forward. Returns (outputs (n, d_model), selections (n, budget))."""
        x = np.asarray(x, dtype=np.float64)
        e = self.experts
        h_perm = x @ e.w1p + e.b1p
        h = h_perm[:, self.partition.permutation]
        scores = self.router.scores_batch(x, h if self.router.needs_h else None)
        sel = np.sort(np.argsort(-scores, axis=1, kind="stable")[:, :self.n], axis=1)
        block = np.repeat(np.arange(self.k), self.partition.d_e)  # expert per permuted slot
        mask = (block[None, :] == sel[:, :, None]).any(axis=1).astype(np.float64)
        y = (relu(h_perm) * mask) @ e.w2p + e.b2
        return y, sel

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Estimator-style batch prediction (outputs only)."""
        return self.forward_batch(np.atleast_2d(np.asarray(x, dtype=np.float64)))[0]

    transform = predict


def moefy(w: FfnWeights, p: ExpertPartition, router: RouterBase, n: int) -> MoefiedFfn:
    return MoefiedFfn(materialize_experts(w, p), p, router, n)


@dataclass
class EvalReport:
    mean_output_mse: float
    coverage: float
    selection_overlap: float
    task_metric: float
    flop_ratio: float

    def to_dict(self) -> dict:
        return {
            "mean_output_mse": self.mean_output_mse,
            "coverage": self.coverage,
            "selection_overlap": self.selection_overlap,
            "task_metric": self.task_metric,
            "flop_ratio": self.flop_ratio,
        }


def coverage_of(sel: np.ndarray, h: np.ndarray, p: ExpertPartition) -> np.ndarray:
    """Per-sample fraction of positive neurons inside the selected experts.
    Samples with no positive neuron count as fully covered."""
    pos = h > 0
    in_sel = np.zeros_like(pos)
    for i in range(sel.shape[0]):
        in_sel[i] = np.isin(p.assignment, sel[i])
    npos = pos.sum(axis=1)
    covered = (pos & in_sel).sum(axis=1)
    return np.where(npos > 0, covered / np.maximum(npos, 1), 1.0)


def evaluate(m: MoefiedFfn, w_original: FfnWeights, d: Dataset) -> EvalReport:
    if len(d) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    x = d.inputs
    y_moe, sel = m.forward_batch(x)
    y_ref = ffn_forward(w_original, x)
    h = x @ w_original.w1 + w_original.b1
    cov = coverage_of(sel, h, m.partition)
    gt_scores = (h > 0).astype(np.float64) @ np.eye(m.k)[m.partition.assignment]
    sel_gt = np.sort(np.argsort(-gt_scores, axis=1, kind="stable")[:, :m.n], axis=1)
    overlap = np.array([np.intersect1d(sel[i], sel_gt[i]).size / m.n
                        for i in range(x.shape[0])])
    d_out = d.targets.shape[1]
    task = float(np.mean((y_moe[:, :d_out] - d.targets) ** 2))
    return EvalReport(
        mean_output_mse=float(np.mean((y_moe - y_ref) ** 2)),
        coverage=float(np.mean(cov)),
        selection_overlap=float(np.mean(overlap)),
        task_metric=task,
        flop_ratio=m.flop_ratio,
    )


def calibrate(m: MoefiedFfn, d: Dataset, targets: np.ndarray | None = None,
              lr: float = 1e-2, epochs: int = 20, seed: int = 0,
              batch: int = 64, w_original: FfnWeights | None = None) -> MoefiedFfn:
    """Gradient descent on the MoE output MSE, updating only the second
    layer (W2 blocks and b2). W1, b1, the router, and the partition are
    untouched. Default target: the original model's outputs (requires
    `w_original`) so calibration absorbs the restricted-selection error.
    """
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if targets is None:
        if w_original is None:
            raise ValueError("need explicit targets or the original weights")
        targets = ffn_forward(w_original, d.inputs)
    targets = np.asarray(targets, dtype=np.float64)
    e = m.experts
    w2p, b2 = e.w2p.copy(), e.b2.copy()
    x = d.inputs
    # selection and first layer are frozen, so precompute the masked relu(h)
    h_perm = x @ e.w1p + e.b1p
    h = h_perm[:, m.partition.permutation]
    scores = m.router.scores_batch(x, h if m.router.needs_h else None)
    sel = np.sort(np.argsort(-scores, axis=1, kind="stable")[:, :m.n], axis=1)
    block = np.repeat(np.arange(m.k), m.partition.d_e)
    mask = (block[None, :] == sel[:, :, None]).any(axis=1).astype(np.float64)
    a = relu(h_perm) * mask
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        order = rng.permutation(x.shape[0])
        for start in range(0, x.shape[0], batch):
            idx = order[start:start + batch]
            y = a[idx] @ w2p + b2
            r = y - targets[idx]
            loss = float(np.mean(r * r))
            if not np.isfinite(loss):
                raise TrainingError(f"calibration diverged at epoch {epoch}")
            dy = 2.0 * r / r.size
            w2p -= lr * (a[idx].T @ dy)
            b2 -= lr * dy.sum(axis=0)
    new_experts = ExpertWeights(w1p=e.w1p, b1p=e.b1p, w2p=w2p, b2=b2, k=e.k)
    return MoefiedFfn(new_experts, m.partition, m.router, m.n)
