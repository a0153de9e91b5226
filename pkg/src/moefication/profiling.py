"""Pre-activation traces and sparsity statistics.

A neuron counts as active only when its pre-activation is strictly
positive; exact zeros contribute nothing through ReLU.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ffn import FfnWeights, ffn_preactivation
from .modelio import Dataset
from .validation import check_finite


@dataclass
class ActivationTrace:
    h_values: np.ndarray  # (samples, d_ff)

    def __post_init__(self):
        self.h_values = np.atleast_2d(np.asarray(self.h_values, dtype=np.float64))
        check_finite(self.h_values, "trace")

    @property
    def samples(self) -> int:
        return self.h_values.shape[0]

    @property
    def d_ff(self) -> int:
        return self.h_values.shape[1]


@dataclass
class SparsityReport:
    per_sample_active_ratio: np.ndarray
    neuron_ever_active: np.ndarray
    negative_ratio: float
    cdf: list  # (ratio threshold, cumulative fraction of samples) pairs

    def to_dict(self) -> dict:
        return {
            "samples": int(self.per_sample_active_ratio.size),
            "d_ff": int(self.neuron_ever_active.size),
            "negative_ratio": self.negative_ratio,
            "mean_active_ratio": float(np.mean(self.per_sample_active_ratio)),
            "ever_active_neurons": int(np.sum(self.neuron_ever_active)),
            "cdf": [[float(r), float(c)] for r, c in self.cdf],
        }


def record_trace(w: FfnWeights, d: Dataset) -> ActivationTrace:
    # per-sample matvec, so each row equals the direct preactivation call
    # bit for bit (batched BLAS may differ in the last ulp)
    rows = [ffn_preactivation(w, x) for x in d.inputs]
    return ActivationTrace(np.stack(rows))


def sparsity_report(t: ActivationTrace, n_thresholds: int = 100) -> SparsityReport:
    if t.samples < 1:
        raise ValueError("trace must contain at least one sample")
    active = t.h_values > 0
    ratios = active.sum(axis=1) / t.d_ff
    negative_ratio = float(np.mean(~active))
    thresholds = np.linspace(0.0, 1.0, n_thresholds)
    cdf = [(float(th), float(np.mean(ratios <= th))) for th in thresholds]
    return SparsityReport(
        per_sample_active_ratio=ratios,
        neuron_ever_active=active.any(axis=0),
        negative_ratio=negative_ratio,
        cdf=cdf,
    )
