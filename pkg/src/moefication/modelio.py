"""Model/dataset persistence, synthetic data, and the toy FFN trainer.

The `.moef` file is a minimal binary format:

    magic "MOEF" | u32 version=1 | u32 d_model | u32 d_ff |
    w1 row-major f64 | b1 f64 | w2 row-major f64 | b2 f64

all little-endian. Round trips are bit-exact.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ffn import FfnWeights, ffn_mse_loss_and_grads

MAGIC = b"MOEF"
VERSION = 1


class FormatError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray   # (n, d_model)
    targets: np.ndarray  # (n, d_out)
    name: str = ""
    group_dims: list = field(default_factory=list)  # latent block widths, if synthetic

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets must have the same length")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def d_model(self) -> int:
        return self.inputs.shape[1]


def save_model(path, w: FfnWeights) -> None:
    d_model, d_ff = w.d_model, w.d_ff
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, d_model, d_ff))
        for arr in (w.w1, w.b1, w.w2, w.b2):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path) -> FfnWeights:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"file too short for header: {len(raw)} bytes")
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, d_model, d_ff = struct.unpack("<III", raw[4:16])
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}")
    n_floats = d_model * d_ff + d_ff + d_ff * d_model + d_model
    expected = 16 + 8 * n_floats
    if len(raw) != expected:
        raise FormatError(f"file length {len(raw)} != expected {expected} bytes")
    flat = np.frombuffer(raw, dtype="<f8", offset=16)
    o = 0
    w1 = flat[o:o + d_model * d_ff].reshape(d_model, d_ff); o += d_model * d_ff
    b1 = flat[o:o + d_ff]; o += d_ff
    w2 = flat[o:o + d_ff * d_model].reshape(d_ff, d_model); o += d_ff * d_model
    b2 = flat[o:o + d_model]
    return FfnWeights(w1.copy(), b1.copy(), w2.copy(), b2.copy())


def save_dataset_csv(path, d: Dataset) -> None:
    n_in, n_out = d.inputs.shape[1], d.targets.shape[1]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"x{i}" for i in range(n_in)] + [f"y{i}" for i in range(n_out)])
        for xi, yi in zip(d.inputs, d.targets):
            wr.writerow([repr(float(v)) for v in xi] + [repr(float(v)) for v in yi])


def load_dataset_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        n_in = sum(1 for c in header if c.startswith("x"))
        rows = [[float(v) for v in row] for row in rd if row]
    arr = np.asarray(rows, dtype=np.float64)
    return Dataset(arr[:, :n_in], arr[:, n_in:], name=Path(path).stem)


def gen_synthetic(kind: str, n: int, d_model: int, seed: int,
                  groups: int = 4, d_out: int = 8) -> Dataset:
    """Deterministic synthetic datasets.

    blobs: two gaussian clusters, one-hot class targets.
    sparse_regression: inputs live (mostly) in one of `groups` disjoint
        blocks of coordinates, target depends on the active block only.
        Trained models develop block-structured neuron co-activation.
    random_proj: dense gaussian inputs, targets a fixed random linear map.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if kind == "blobs":
        centers = rng.normal(size=(2, d_model)) * 3.0
        labels = rng.integers(0, 2, size=n)
        x = centers[labels] + rng.normal(size=(n, d_model))
        y = np.zeros((n, 2))
        y[np.arange(n), labels] = 1.0
        return Dataset(x, y, name=f"blobs-{n}-{seed}")
    if kind == "sparse_regression":
        if d_model % groups != 0:
            raise ValueError("d_model must be divisible by the group count")
        bw = d_model // groups
        per_out = max(2, d_out // groups)
        maps = rng.normal(size=(groups, bw, per_out - 1)) / np.sqrt(bw)
        # each group's block gets a mean offset so membership is decodable,
        # and its own target slice (plus an indicator dim) so middle
        # neurons are pushed to specialize by group
        mus = rng.normal(size=(groups, bw))
        mus = 3.0 * mus / np.linalg.norm(mus, axis=1, keepdims=True)
        labels = rng.integers(0, groups, size=n)
        x = np.zeros((n, d_model))
        y = np.zeros((n, groups * per_out))
        for i, g in enumerate(labels):
            block = mus[g] + rng.normal(size=bw)
            x[i, g * bw:(g + 1) * bw] = block
            y[i, g * per_out] = 1.0
            y[i, g * per_out + 1:(g + 1) * per_out] = np.maximum(block @ maps[g], 0.0)
        return Dataset(x, y, name=f"sparse_regression-{n}-{seed}",
                       group_dims=[bw] * groups)
    if kind == "random_proj":
        proj = rng.normal(size=(d_model, d_out)) / np.sqrt(d_model)
        x = rng.normal(size=(n, d_model))
        return Dataset(x, x @ proj, name=f"random_proj-{n}-{seed}")
    raise ValueError(f"unknown synthetic kind {kind!r}")


def init_ffn(d_model: int, d_ff: int, d_out: int, seed: int) -> FfnWeights:
    rng = np.random.default_rng(seed)
    w1 = rng.normal(size=(d_model, d_ff)) / np.sqrt(d_model)
    b1 = np.full(d_ff, -0.5)  # negative bias so ReLU starts sparse
    w2 = rng.normal(size=(d_ff, d_out)) / np.sqrt(d_ff)
    b2 = np.zeros(d_out)
    return FfnWeights(w1, b1, w2, b2)


def train_toy_ffn(d: Dataset, d_ff: int, epochs: int, lr: float, seed: int,
                  batch: int = 64) -> FfnWeights:
    """Plain minibatch SGD on MSE. Deterministic given the seed.

    Targets are zero-padded to d_model width when narrower, so the trained
    block always has square W2 as a real FFN layer does.
    """
    if len(d) == 0:
        raise ValueError("dataset is empty")
    if lr <= 0:
        raise ValueError("lr must be > 0")
    d_out = d.targets.shape[1]
    if d_out > d.d_model:
        raise ValueError("target dim exceeds d_model")
    targets = d.targets
    if d_out < d.d_model:
        targets = np.hstack([targets, np.zeros((len(d), d.d_model - d_out))])
    w = init_ffn(d.d_model, d_ff, d.d_model, seed)
    rng = np.random.default_rng(seed + 1)
    w1, b1, w2, b2 = w.w1.copy(), w.b1.copy(), w.w2.copy(), w.b2.copy()
    for epoch in range(epochs):
        order = rng.permutation(len(d))
        for start in range(0, len(d), batch):
            idx = order[start:start + batch]
            cur = FfnWeights(w1, b1, w2, b2)
            loss, g = ffn_mse_loss_and_grads(cur, d.inputs[idx], targets[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            w1 = w1 - lr * g["dw1"]
            b1 = b1 - lr * g["db1"]
            w2 = w2 - lr * g["dw2"]
            b2 = b2 - lr * g["db2"]
    return FfnWeights(w1, b1, w2, b2)
