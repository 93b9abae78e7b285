import math
from itertools import permutations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from solar.attention import AttnConfig
from solar.datagen import FlipSpec, RankingInstance, gen_catalog, gen_dataset
from solar.linalg import make_rng
from solar.metrics import auc, bipartite_risk, grouped_auc
from solar.model import (
    SolarRanker,
    TrainConfig,
    TrainingDiverged,
    backward_batch,
    batch_loss,
    evaluate,
    forward_batch,
    forward_scores,
    init_params,
    listwise_loss,
    train,
)


def instance(hist, cands, labels=None, user=0):
    cands = np.asarray(cands)
    labels = np.zeros(len(cands), dtype=np.int64) if labels is None else np.asarray(labels)
    return RankingInstance(user, np.asarray(hist), cands, labels, np.full(len(cands), 0.5))


def with_random_values(params, seed=0):
    rng = make_rng(seed)
    d = params.dim
    params.W_V[:] = rng.standard_normal((d, d)) / np.sqrt(d)
    params.S_V[:] = rng.standard_normal((d, d)) / np.sqrt(d)
    return params


# -- forward -------------------------------------------------------------------------

@pytest.mark.parametrize("blocks", ["none", "history"])
@pytest.mark.parametrize("normalize", [False, True])
def test_pointwise_configurations_ignore_co_candidates(blocks, normalize):
    p = with_random_values(init_params(30, 8, AttnConfig("svd", rank=2), blocks, seed=1, normalize=normalize))
    hist = np.arange(10)
    base = forward_scores(p, instance(hist, [11, 12, 13, 14]))[0]
    swapped = forward_scores(p, instance(hist, [11, 20, 21, 22]))[0]
    perm = forward_scores(p, instance(hist, [14, 13, 11, 12]))[0]
    assert abs(base[0] - swapped[0]) <= 1e-12
    assert np.max(np.abs(perm - base[[3, 2, 0, 1]])) <= 1e-12


def test_set_block_sees_duplicates():
    p = with_random_values(init_params(30, 8, AttnConfig("svd", rank=2), "both", seed=1))
    hist = np.arange(10)
    a = forward_scores(p, instance(hist, [11, 12, 13]))[0]
    b = forward_scores(p, instance(hist, [11, 12, 12]))[0]
    assert abs(a[0] - b[0]) > 1e-6


def test_zero_head_and_bad_ids():
    p = init_params(30, 8, AttnConfig("svd", rank=2), "both", seed=1)
    p.w[:] = 0.0
    assert not forward_scores(p, instance(np.arange(5), [1, 2]))[0].any()
    with pytest.raises(IndexError):
        forward_scores(p, instance(np.arange(5), [1, 30]))


def test_value_maps_start_at_zero():
    p = init_params(30, 8, AttnConfig("svd", rank=2), "both", seed=1)
    assert not p.W_V.any() and not p.S_V.any()


# -- listwise loss -------------------------------------------------------------------

def py_listwise(s, pos):
    top = max(s)
    lse = top + math.log(math.fsum(math.exp(x - top) for x in s))
    soft = [math.exp(x - lse) for x in s]
    grad = [soft[t] - (1.0 / len(pos) if t in pos else 0.0) for t in range(len(s))]
    return lse - math.fsum(s[i] for i in pos) / len(pos), grad


def test_listwise_examples(rng):
    loss, grad = listwise_loss([0.0, 0.0], [1])
    assert abs(loss - math.log(2)) <= 1e-15
    assert np.allclose(grad, [0.5, -0.5], atol=1e-15)
    loss, _ = listwise_loss([800.0, 0.0, -5.0], [0])
    assert 0.0 <= loss < 1e-12
    s = rng.standard_normal(6)
    loss, grad = listwise_loss(s, [1, 4])
    ref_loss, ref_grad = py_listwise(s.tolist(), [1, 4])
    assert abs(loss - ref_loss) <= 1e-14 and np.allclose(grad, ref_grad, atol=1e-15)
    assert np.linalg.norm(grad) <= math.sqrt(2)
    with pytest.raises(ValueError):
        listwise_loss(s, [])


def test_listwise_sign_of_gradient_matches_spec_example():
    # P = {1} with s = (0, 0): the positive's gradient is -0.5
    _, grad = listwise_loss([0.0, 0.0], [0])
    assert np.allclose(grad, [-0.5, 0.5])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 40), st.floats(-1e3, 1e3))
def test_listwise_bound_and_shift_invariance(seed, m, shift):
    rng = make_rng(seed)
    s = rng.standard_normal(m) * 10.0 ** rng.uniform(-2, 2)
    pos = rng.choice(m, size=int(rng.integers(1, m)), replace=False)
    loss, grad = listwise_loss(s, pos)
    assert np.linalg.norm(grad) <= math.sqrt(2) + 1e-12
    loss2, _ = listwise_loss(s + shift, pos)
    assert abs(loss2 - loss) <= 1e-10 * max(1.0, abs(shift))
    assert np.array_equal(np.argsort(s + shift, kind="stable"), np.argsort(s, kind="stable")) or shift == 0


def test_batch_loss_skips_requests_without_positives():
    scores = np.zeros((2, 3))
    labels = np.array([[0, 0, 0], [1, 0, 0]])
    loss, grad, used = batch_loss(scores, labels, "listwise")
    assert used == 1 and not grad[0].any()
    assert abs(loss - math.log(3)) <= 1e-15


@pytest.mark.parametrize("kind", ["pointwise-bce", "pairwise-bce"])
def test_other_losses_gradients(rng, kind):
    scores = rng.standard_normal((3, 5))
    labels = (rng.random((3, 5)) < 0.5).astype(int)
    labels[:, 0] = 1
    labels[:, 1] = 0
    _, grad, _ = batch_loss(scores, labels, kind)
    num = np.zeros_like(scores)
    for idx in np.ndindex(scores.shape):
        e = np.zeros_like(scores)
        e[idx] = 1e-6
        num[idx] = (batch_loss(scores + e, labels, kind)[0] - batch_loss(scores - e, labels, kind)[0]) / 2e-6
    assert np.max(np.abs(grad - num)) <= 1e-8


# -- end-to-end finite differences ----------------------------------------------------------

@pytest.mark.parametrize("variant,softmax,normalize", [
    ("svd", True, False), ("svd", False, True), ("softmax", True, False), ("linear", True, True),
])
def test_full_model_finite_differences(variant, softmax, normalize):
    p = with_random_values(init_params(20, 8, AttnConfig(variant, rank=2, n_iter=6, apply_softmax=softmax),
                                       "both", seed=3, normalize=normalize), seed=4)
    rng = make_rng(0)
    # histories use ids 0..9, candidates 10..19: candidate embedding rows do
    # not pass through the truncated SVD, so their gradient is exact
    hist = rng.integers(0, 10, (2, 6))
    cand = rng.integers(10, 20, (2, 5))
    labels = (rng.random((2, 5)) < 0.4).astype(int)
    labels[:, 0] = 1

    def loss():
        return batch_loss(forward_batch(p, hist, cand, rng=7)[0], labels, "listwise")[0]

    s, cache = forward_batch(p, hist, cand, rng=7)
    grads = backward_batch(p, cache, batch_loss(s, labels, "listwise")[1])
    names = ["w", "W_Q", "W_K", "W_V", "S_Q", "S_K", "S_V", "emb"]
    for name in names:
        A = getattr(p, name)
        rows = slice(10, 20) if (name == "emb" and variant == "svd") else slice(None)
        num = np.zeros_like(A)
        for idx in np.ndindex(A.shape):
            if name == "emb" and variant == "svd" and idx[0] < 10:
                continue
            h = 1e-6 * (1 + abs(A[idx]))
            old = A[idx]
            A[idx] = old + h
            fp = loss()
            A[idx] = old - h
            fm = loss()
            A[idx] = old
            num[idx] = (fp - fm) / (2 * h)
        err = np.max(np.abs(num[rows] - grads[name][rows])) / max(np.max(np.abs(num[rows])), 1e-12)
        assert err <= 1e-3, (name, err)


# -- training --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_data():
    cat = gen_catalog(60, 8, 3, seed=0)
    return gen_dataset(cat, 120, n_hist=8, m=6, flip=FlipSpec(a=3.0, b=2.0), seed=1, ensure_both=True)


def test_zero_lr_leaves_params(small_data):
    p = init_params(60, 8, AttnConfig("svd", rank=2), "both", seed=0)
    out, hist = train(p, small_data, TrainConfig(lr=0.0, epochs=3))
    for name, arr in p.arrays().items():
        assert np.array_equal(arr, getattr(out, name))
    assert len(hist) == 3


def test_training_is_deterministic(small_data):
    cfg = TrainConfig(lr=0.05, epochs=2, seed=4)
    runs = [train(init_params(60, 8, AttnConfig("svd", rank=2), "both", seed=0), small_data, cfg)[1]
            for _ in range(2)]
    assert runs[0] == runs[1]


def test_memorizable_instance_loss_decreases():
    inst = instance(np.arange(6), [6, 7, 8, 9], labels=[0, 1, 0, 0])
    p = init_params(10, 4, AttnConfig("svd", rank=2), "both", seed=0)
    losses = []
    for step in range(50):
        p, hist = train(p, [inst], TrainConfig(lr=0.01, momentum=0.0, epochs=1, seed=step))
        losses.append(hist[0]["loss"])
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_divergence_returns_checkpoint(small_data):
    p = init_params(60, 8, AttnConfig("linear"), "both", seed=0)
    p.w[:] = 1e150
    with pytest.raises(TrainingDiverged) as err:
        train(p, small_data, TrainConfig(lr=1e10, epochs=3))
    assert err.value.history == [] or all(np.isfinite(h["loss"]) for h in err.value.history)
    assert all(np.all(np.isfinite(a)) for a in err.value.params.arrays().values())


def test_ranker_estimator(small_data):
    est = SolarRanker(dim=8, rank=2, epochs=2, random_state=0).fit(small_data)
    scores = est.predict(small_data[:3])
    assert [s.shape for s in scores] == [(6,)] * 3
    assert 0.0 <= est.score(small_data) <= 1.0
    assert set(evaluate(est.params_, small_data)) == {"auc", "uauc", "risk"}
    with pytest.raises(ValueError):
        SolarRanker(blocks="nope").fit(small_data)


# -- metrics ---------------------------------------------------------------------------------

def brute_risk(s, y):
    pairs = [(i, j) for i in range(len(s)) for j in range(len(s)) if y[i] == 1 and y[j] == 0]
    return sum(s[j] >= s[i] for i, j in pairs) / len(pairs)


def brute_auc(s, y):
    pairs = [(i, j) for i in range(len(s)) for j in range(len(s)) if y[i] == 1 and y[j] == 0]
    return sum(1.0 if s[i] > s[j] else 0.5 if s[i] == s[j] else 0.0 for i, j in pairs) / len(pairs)


def test_metric_examples():
    y = np.array([1, 1, 0, 0])
    assert bipartite_risk([4, 3, 2, 1], y) == 0.0
    assert bipartite_risk([1, 2, 3, 4], y) == 1.0
    assert auc([4, 3, 2, 1], y) == 1.0
    assert auc([1, 1, 1, 1], y) == 0.5
    assert bipartite_risk([1, 1, 1, 1], y) == 1.0  # ties count as errors
    assert np.isnan(auc([1, 2], [1, 1]))
    assert bipartite_risk([1, 2], [0, 0]) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=8, max_size=8), st.lists(st.integers(0, 1), min_size=8, max_size=8))
def test_metrics_match_brute_force(s, y):
    y = np.array(y)
    if 0 < y.sum() < 8:
        assert abs(bipartite_risk(s, y) - brute_risk(s, y)) <= 1e-15
        assert abs(auc(s, y) - brute_auc(s, y)) <= 1e-15


def test_grouped_auc_skips_single_class():
    assert grouped_auc([[1, 0], [3, 2], [1, 1]], [[1, 0], [0, 1], [1, 1]]) == 0.5


def test_permutation_brute_force_agrees_with_auc_on_strict_orders():
    y = np.array([1, 0, 1, 0])
    for perm in permutations(range(4)):
        s = np.array(perm, dtype=float)
        assert abs(auc(s, y) + bipartite_risk(s, y) - 1.0) <= 1e-15
