import numpy as np
import pytest

import moefication as M
from moefication.modelio import FormatError, init_ffn

from conftest import random_ffn


def test_model_roundtrip_bit_exact(tmp_path):
    w = random_ffn(np.random.default_rng(1), 5, 10)
    path = tmp_path / "m.moef"
    M.save_model(path, w)
    w2 = M.load_model(path)
    for a, b in [(w.w1, w2.w1), (w.b1, w2.b1), (w.w2, w2.w2), (w.b2, w2.b2)]:
        assert a.tobytes() == b.tobytes()


def test_load_bad_magic(tmp_path):
    p = tmp_path / "bad.moef"
    p.write_bytes(b"XXXX" + b"\0" * 32)
    with pytest.raises(FormatError, match="magic"):
        M.load_model(p)


def test_load_truncated(tmp_path):
    w = random_ffn(np.random.default_rng(2), 3, 6)
    p = tmp_path / "m.moef"
    M.save_model(p, w)
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(FormatError, match="length"):
        M.load_model(p)


def test_load_bad_version(tmp_path):
    w = random_ffn(np.random.default_rng(2), 3, 6)
    p = tmp_path / "m.moef"
    M.save_model(p, w)
    raw = bytearray(p.read_bytes())
    raw[4] = 9
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        M.load_model(p)


def test_dataset_csv_roundtrip(tmp_path):
    d = M.gen_synthetic("blobs", 20, 6, 3)
    p = tmp_path / "d.csv"
    M.save_dataset_csv(p, d)
    d2 = M.load_dataset_csv(p)
    assert np.array_equal(d.inputs, d2.inputs)
    assert np.array_equal(d.targets, d2.targets)
    header = p.read_text().splitlines()[0]
    assert header.startswith("x0,") and ",y0," in header


@pytest.mark.parametrize("kind", ["blobs", "sparse_regression", "random_proj"])
def test_gen_synthetic_deterministic(kind):
    a = M.gen_synthetic(kind, 50, 16, 9)
    b = M.gen_synthetic(kind, 50, 16, 9)
    assert np.array_equal(a.inputs, b.inputs)
    assert np.array_equal(a.targets, b.targets)


def test_gen_synthetic_single_sample():
    d = M.gen_synthetic("blobs", 1, 8, 0)
    assert len(d) == 1


def test_gen_synthetic_rejects_zero():
    with pytest.raises(ValueError):
        M.gen_synthetic("blobs", 0, 8, 0)


def test_train_reduces_mse():
    d = M.gen_synthetic("blobs", 200, 8, 5)
    pad = np.hstack([d.targets, np.zeros((len(d), 8 - d.targets.shape[1]))])
    w0 = init_ffn(8, 64, 8, 5)
    mse0 = float(np.mean((M.ffn_forward(w0, d.inputs) - pad) ** 2))
    w = M.train_toy_ffn(d, 64, epochs=50, lr=0.05, seed=5)
    mse = float(np.mean((M.ffn_forward(w, d.inputs) - pad) ** 2))
    assert mse < 0.1 * mse0


def test_train_zero_epochs_is_init():
    d = M.gen_synthetic("blobs", 50, 8, 5)
    w = M.train_toy_ffn(d, 16, epochs=0, lr=0.05, seed=11)
    w0 = init_ffn(8, 16, 8, 11)
    assert w.w1.tobytes() == w0.w1.tobytes()
    assert w.w2.tobytes() == w0.w2.tobytes()


def test_train_deterministic():
    d = M.gen_synthetic("sparse_regression", 100, 16, 5)
    a = M.train_toy_ffn(d, 32, epochs=5, lr=0.05, seed=2)
    b = M.train_toy_ffn(d, 32, epochs=5, lr=0.05, seed=2)
    for x, y in [(a.w1, b.w1), (a.b1, b.b1), (a.w2, b.w2), (a.b2, b.b2)]:
        assert x.tobytes() == y.tobytes()


def test_train_rejects_bad_lr():
    d = M.gen_synthetic("blobs", 10, 8, 0)
    with pytest.raises(ValueError):
        M.train_toy_ffn(d, 8, epochs=1, lr=0.0, seed=0)
