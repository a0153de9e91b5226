from itertools import combinations

import numpy as np
import pytest

import moefication as M
from moefication.routers import (
    LearnableRouterParams,
    _normalize_counts,
    count_targets,
    score_learnable,
)
from moefication.splitters import ExpertPartition

from conftest import random_ffn


def brute_force_top_n(scores, n):
    best, best_set = -np.inf, None
    for subset in combinations(range(len(scores)), n):
        total = sum(scores[i] for i in subset)
        if total > best + 1e-15:
            best, best_set = total, subset
    return set(best_set)


# --------------------------------------------------------------------------
# top-n selection

def test_select_top_n_hand():
    assert M.select_top_n(np.array([3.0, 1.0, 2.0]), 2).tolist() == [0, 2]


def test_select_top_n_full_budget():
    assert M.select_top_n(np.arange(5.0), 5).tolist() == [0, 1, 2, 3, 4]


def test_select_top_n_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(30):
        s = rng.normal(size=12)
        got = set(M.select_top_n(s, 5).tolist())
        assert sum(s[i] for i in got) == pytest.approx(
            sum(s[i] for i in brute_force_top_n(s, 5)), abs=1e-12)


def test_select_top_n_tie_breaks_low_index():
    assert M.select_top_n(np.array([1.0, 1.0, 1.0]), 2).tolist() == [0, 1]


def test_select_top_n_bad_budget():
    with pytest.raises(ValueError):
        M.select_top_n(np.ones(3), 0)
    with pytest.raises(ValueError):
        M.select_top_n(np.ones(3), 4)


# --------------------------------------------------------------------------
# groundtruth scores

def test_groundtruth_hand_counts():
    h = np.array([1.0, -1.0, 2.0, -3.0])
    p1 = ExpertPartition(k=2, assignment=np.array([0, 0, 1, 1]))
    assert M.score_groundtruth(h, p1).tolist() == [1.0, 1.0]
    p2 = ExpertPartition(k=2, assignment=np.array([0, 1, 0, 1]))
    assert M.score_groundtruth(h, p2).tolist() == [2.0, 0.0]


def test_groundtruth_all_negative():
    p = ExpertPartition(k=2, assignment=np.array([0, 0, 1, 1]))
    assert not M.score_groundtruth(-np.ones(4), p).any()


def test_groundtruth_greedy_is_exhaustive_optimum():
    rng = np.random.default_rng(1)
    for _ in range(50):
        k = int(rng.choice([2, 4, 8]))
        d_ff = k * int(rng.integers(1, 16 // k + 1))
        p = M.split_random(d_ff, k, seed=int(rng.integers(1, 1000)))
        h = rng.normal(size=d_ff)
        n = int(rng.integers(1, k + 1))
        s = M.score_groundtruth(h, p)
        sel = set(M.select_top_n(s, n).tolist())
        covered = sum(s[i] for i in sel)
        best = max(sum(s[i] for i in sub)
                   for sub in combinations(range(k), n))
        assert covered == best


# --------------------------------------------------------------------------
# center scores

def _expert_weights(w1, k):
    d_model, d_ff = w1.shape
    w = M.FfnWeights(w1, np.zeros(d_ff), np.zeros((d_ff, d_model)), np.zeros(d_model))
    p = M.split_random(d_ff, k, seed=0)
    return M.materialize_experts(w, p)


def test_param_center_extremes():
    w1 = np.array([[1.0, 1.0, 0.0, 0.0],
                   [0.0, 0.0, 1.0, 1.0]])
    e = _expert_weights(w1, 2)
    s = M.score_param_center(np.array([2.0, 0.0]), e)
    assert s[0] == pytest.approx(1.0)
    assert s[1] == pytest.approx(0.0)


def test_param_center_zero_input():
    e = _expert_weights(np.random.default_rng(2).normal(size=(3, 6)), 2)
    assert not M.score_param_center(np.zeros(3), e).any()


def test_center_scores_match_naive_cosine():
    rng = np.random.default_rng(3)
    e = _expert_weights(rng.normal(size=(5, 10)), 2)
    x = rng.normal(size=5)
    for fn, center in [
        (M.score_param_center, lambda i: e.w1_block(i).mean(axis=1)),
        (M.score_random_center, lambda i: e.w1_block(i)[:, 0]),
    ]:
        s = fn(x, e)
        for i in range(2):
            c = center(i)
            ref = float(x @ c / (np.linalg.norm(x) * np.linalg.norm(c)))
            assert s[i] == pytest.approx(ref, abs=1e-12)


def test_random_center_first_column_match():
    rng = np.random.default_rng(4)
    w1 = rng.normal(size=(4, 8))
    e = _expert_weights(w1, 2)
    s = M.score_random_center(w1[:, 0], e)
    assert s[0] == pytest.approx(1.0)


def test_cosine_selection_scale_invariant():
    rng = np.random.default_rng(5)
    e = _expert_weights(rng.normal(size=(6, 12)), 4)
    x = rng.normal(size=6)
    base = M.select_top_n(M.score_param_center(x, e), 2)
    for scale in (0.01, 3.0, 1e6):
        assert np.array_equal(M.select_top_n(M.score_param_center(scale * x, e), 2), base)


# --------------------------------------------------------------------------
# learnable router

def test_score_learnable_zero_weights():
    r = LearnableRouterParams(np.zeros((3, 2)), np.zeros(2), np.zeros((2, 2)),
                              np.array([0.5, -0.5]))
    assert score_learnable(np.ones(3), r).tolist() == [0.5, -0.5]


def test_score_learnable_hand_2x2():
    r = LearnableRouterParams(np.array([[1.0, 0.0], [0.0, 1.0]]), np.zeros(2),
                              np.array([[2.0, 0.0], [0.0, 3.0]]), np.array([0.1, 0.2]))
    x = np.array([0.5, -0.5])
    expected = np.array([2 * np.tanh(0.5) + 0.1, 3 * np.tanh(-0.5) + 0.2])
    assert np.allclose(score_learnable(x, r), expected, atol=1e-15)


def test_score_learnable_output_dim():
    rng = np.random.default_rng(6)
    r = LearnableRouterParams(rng.normal(size=(5, 7)), rng.normal(size=7),
                              rng.normal(size=(7, 7)), rng.normal(size=7))
    assert score_learnable(rng.normal(size=5), r).shape == (7,)


def test_normalize_counts_zero_rows_uniform():
    q = _normalize_counts(np.array([[0.0, 0.0], [3.0, 1.0]]))
    assert q[0].tolist() == [0.5, 0.5]
    assert q[1].tolist() == [0.75, 0.25]


def _router_training_setup(seed=0):
    rng = np.random.default_rng(seed)
    w = random_ffn(rng, 8, 16)
    p = M.split_random(16, 4, seed=0)
    d = M.Dataset(rng.normal(size=(200, 8)), np.zeros((200, 1)))
    trace = M.record_trace(w, d)
    return w, p, d, trace


def test_router_trains_on_planted_target():
    # inputs with x[0] >> 0 activate only expert 0's neurons
    rng = np.random.default_rng(7)
    d_ff, k = 16, 4
    w1 = np.zeros((4, d_ff))
    w1[0, :4] = 1.0   # expert 0 neurons driven by coordinate 0
    w1[1:, 4:] = rng.normal(size=(3, 12)) * 0.01
    w = M.FfnWeights(w1, np.full(d_ff, -0.1), np.zeros((d_ff, 4)), np.zeros(4))
    x = np.abs(rng.normal(size=(500, 4))) + 0.5
    d = M.Dataset(x, np.zeros((500, 1)))
    trace = M.record_trace(w, d)
    p = M.split_random(d_ff, k, seed=0)
    r = M.train_learnable_router(w, p, trace, x, epochs=50, batch=64, seed=1)
    dev = x[450:]
    ranked_first = np.mean(np.argmax(score_learnable(dev, r), axis=1) == 0)
    assert ranked_first >= 0.95


def test_router_zero_epochs_returns_init():
    w, p, d, trace = _router_training_setup()
    r = M.train_learnable_router(w, p, trace, d.inputs, epochs=0, seed=3)
    from moefication.routers import init_router
    r0 = init_router(8, 4, 3)
    assert r.w1.tobytes() == r0.w1.tobytes()
    assert len(r.dev_loss) == 1


def test_router_training_deterministic():
    w, p, d, trace = _router_training_setup()
    a = M.train_learnable_router(w, p, trace, d.inputs, epochs=3, seed=5)
    b = M.train_learnable_router(w, p, trace, d.inputs, epochs=3, seed=5)
    for x, y in [(a.w1, b.w1), (a.b1, b.b1), (a.w2, b.w2), (a.b2, b.b2)]:
        assert x.tobytes() == y.tobytes()


def test_router_train_loss_mostly_nonincreasing():
    w, p, d, trace = _router_training_setup(9)
    r = M.train_learnable_router(w, p, trace, d.inputs, epochs=40, batch=64, seed=2)
    losses = r.train_loss
    drops = sum(1 for a, b in zip(losses, losses[1:]) if b <= a + 1e-12)
    assert drops / (len(losses) - 1) >= 0.95


def test_count_targets_matches_scores():
    w, p, d, trace = _router_training_setup(11)
    counts = count_targets(trace, p)
    for i in range(0, 200, 37):
        assert np.array_equal(counts[i], M.score_groundtruth(trace.h_values[i], p))


def test_router_persistence_roundtrip(tmp_path):
    w, p, d, trace = _router_training_setup(13)
    for name, router in [
        ("gt", M.GroundtruthRouter().fit(w, p)),
        ("param", M.ParamCenterRouter().fit(w, p)),
        ("random", M.RandomCenterRouter().fit(w, p)),
        ("learn", M.LearnableRouter(epochs=2).fit(w, p, trace=trace, inputs=d.inputs)),
    ]:
        path = tmp_path / f"{name}.json"
        M.save_router(path, router)
        loaded = M.load_router(path, p)
        x = d.inputs[3]
        h = trace.h_values[3]
        assert np.array_equal(router.scores(x, h), loaded.scores(x, h))
