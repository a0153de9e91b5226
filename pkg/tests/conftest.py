import numpy as np
import pytest

import moefication as M


def naive_ffn_forward(w, x):
    """Triple-loop reference, deliberately independent of numpy matmul."""
    d_model, d_ff = w.d_model, w.d_ff
    h = [0.0] * d_ff
    for j in range(d_ff):
        acc = w.b1[j]
        for i in range(d_model):
            acc += x[i] * w.w1[i, j]
        h[j] = acc
    y = [0.0] * d_model
    for o in range(d_model):
        acc = w.b2[o]
        for j in range(d_ff):
            a = h[j] if h[j] > 0 else 0.0
            acc += a * w.w2[j, o]
        y[o] = acc
    return np.array(y)


def random_ffn(rng, d_model, d_ff, scale=1.0):
    return M.FfnWeights(
        rng.normal(size=(d_model, d_ff)) * scale / np.sqrt(d_model),
        rng.normal(size=d_ff) * 0.1,
        rng.normal(size=(d_ff, d_model)) * scale / np.sqrt(d_ff),
        rng.normal(size=d_model) * 0.1,
    )


TOY_SEED = 7
TOY_D_MODEL = 64
TOY_D_FF = 512
TOY_K = 16
TOY_N = 4  # 20% budget


@pytest.fixture(scope="session")
def toy_bundle():
    """One trained sparse-activation toy model shared by the heavier tests."""
    d = M.gen_synthetic("sparse_regression", 4000, TOY_D_MODEL, TOY_SEED)
    d_train = M.Dataset(d.inputs[:3000], d.targets[:3000], "toy-train")
    d_eval = M.Dataset(d.inputs[3000:], d.targets[3000:], "toy-eval")
    w = M.train_toy_ffn(d_train, TOY_D_FF, epochs=500, lr=0.05, seed=TOY_SEED)
    trace = M.record_trace(w, d_train)
    return {"w": w, "train": d_train, "eval": d_eval, "trace": trace, "full": d}
