"""Dense ReLU feed-forward layer: forward pass and hand-written gradients.

Everything here is float64 and pure; arrays passed in are never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import as_matrix, as_vector, check_finite


@dataclass(frozen=True)
class FfnWeights:
    """Parameters of one two-layer feed-forward block.

    w1: (d_model, d_ff), b1: (d_ff,), w2: (d_ff, d_model), b2: (d_model,).
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "w1", as_matrix(self.w1, "w1"))
        object.__setattr__(self, "b1", as_vector(self.b1, "b1"))
        object.__setattr__(self, "w2", as_matrix(self.w2, "w2"))
        object.__setattr__(self, "b2", as_vector(self.b2, "b2"))
        d_model, d_ff = self.w1.shape
        if d_ff < 1:
            raise ValueError("d_ff must be >= 1")
        if self.b1.shape != (d_ff,):
            raise ValueError(f"b1 shape {self.b1.shape} != ({d_ff},)")
        if self.w2.shape != (d_ff, d_model):
            raise ValueError(f"w2 shape {self.w2.shape} != ({d_ff}, {d_model})")
        if self.b2.shape != (d_model,):
            raise ValueError(f"b2 shape {self.b2.shape} != ({d_model},)")

    @property
    def d_model(self) -> int:
        return self.w1.shape[0]

    @property
    def d_ff(self) -> int:
        return self.w1.shape[1]


def relu(v: np.ndarray) -> np.ndarray:
    return np.maximum(v, 0.0)


def ffn_preactivation(w: FfnWeights, x: np.ndarray) -> np.ndarray:
    """h = x W1 + b1 for a single input or a batch (last axis = d_model)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.d_model:
        raise ValueError(f"input dim {x.shape[-1]} != d_model {w.d_model}")
    h = x @ w.w1 + w.b1
    check_finite(h, "preactivation")
    return h


def ffn_forward(w: FfnWeights, x: np.ndarray) -> np.ndarray:
    """F(x) = relu(x W1 + b1) W2 + b2, single input or batch."""
    y = relu(ffn_preactivation(w, x)) @ w.w2 + w.b2
    check_finite(y, "ffn output")
    return y


def ffn_mse_loss_and_grads(w: FfnWeights, x: np.ndarray, t: np.ndarray):
    """Mean squared error of the FFN against targets, with parameter grads.

    x: (n, d_model), t: (n, d_out == d_model). Loss is mean over all entries.
    Returns (loss, dict with dw1, db1, dw2, db2).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    n = x.shape[0]
    h = x @ w.w1 + w.b1
    a = relu(h)
    y = a @ w.w2 + w.b2
    r = y - t
    loss = float(np.mean(r * r))
    dy = 2.0 * r / r.size
    dw2 = a.T @ dy
    db2 = dy.sum(axis=0)
    da = dy @ w.w2.T
    dh = da * (h > 0)
    dw1 = x.T @ dh
    db1 = dh.sum(axis=0)
    assert n == x.shape[0]
    return loss, {"dw1": dw1, "db1": db1, "dw2": dw2, "db2": db2}


def grad_check(f, point: np.ndarray, eps: float = 1e-5) -> float:
    """Compare analytic against central-difference gradients.

    `f(v)` must return (scalar_loss, gradient_vector). Returns the max over
    coordinates of |analytic - numeric| / (|analytic| + |numeric| + 1e-8).
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError("eps must lie in (0, 1e-2]")
    point = np.asarray(point, dtype=np.float64)
    _, g = f(point)
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("analytic gradient is not finite")
    worst = 0.0
    for i in range(point.size):
        p = point.copy()
        p.flat[i] += eps
        lo_plus, _ = f(p)
        p.flat[i] -= 2 * eps
        lo_minus, _ = f(p)
        num = (lo_plus - lo_minus) / (2 * eps)
        ana = g.flat[i]
        worst = max(worst, abs(ana - num) / (abs(ana) + abs(num) + 1e-8))
    return worst
