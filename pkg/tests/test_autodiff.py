import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import solar.autodiff as autodiff
from solar.attention import AttnConfig, attend, attention_backward, attn_svd
from solar.autodiff import (
    SvdGrads,
    bias_term,
    build_F,
    chain_to_factors,
    pipeline_backward,
    svd_backward_full_oracle,
    svd_backward_truncated,
)
from solar.gradcheck import check_instance, gradient_suite, low_rank_with_gaps, make_instance, numeric_grad
from solar.linalg import make_rng, svd_dense
from solar.randsvd import SvdFactors, randomized_svd, recover_left_vectors

from conftest import rel


def exact_factors(H, r):
    return recover_left_vectors(H, randomized_svd(H, r, n_iter=6, rng=0))


def tangent_projection(H, r, G):
    dec = svd_dense(H)
    U, V = dec.U[:, :r], dec.V[:, :r]
    return U @ (U.T @ G @ V) @ V.T


# -- chain_to_factors ----------------------------------------------------------------

def test_chain_zero_and_sum_of_sigmas(rng):
    H = rng.standard_normal((8, 5))
    f = randomized_svd(H, 3, rng=0)
    g = chain_to_factors(np.zeros((3, 5)), f.V, f.s)
    assert not g.bar_sigma.any() and not g.bar_V.any()
    # L = sum_i s_i = sum_i <P_i, v_i>, so G_P = V^T
    g = chain_to_factors(f.V.T, f.V, f.s)
    assert np.allclose(g.bar_sigma, 1.0, atol=1e-14)


def test_chain_matches_finite_differences(rng):
    s = np.array([3.0, 2.0, 0.5])
    V = rng.standard_normal((5, 3))
    G_P = rng.standard_normal((3, 5))
    g = chain_to_factors(G_P, V, s)
    loss_s = lambda x: float(np.sum(G_P * (x[:, None] * V.T)))
    loss_V = lambda x: float(np.sum(G_P * (s[:, None] * x.T)))
    assert rel(g.bar_sigma, numeric_grad(loss_s, s)) <= 1e-4
    assert rel(g.bar_V, numeric_grad(loss_V, V)) <= 1e-4
    with pytest.raises(ValueError):
        chain_to_factors(np.zeros((5, 3)), V, s)


# -- build_F ---------------------------------------------------------------------------

def test_build_F_examples():
    F, n = build_F([2.0, 1.0])
    assert np.allclose(F, [[0.0, 1 / 3], [-1 / 3, 0.0]], atol=0) and n == 0
    F, n = build_F([1.0, 1.0])
    assert not F.any() and n == 1
    F, _ = build_F([3.0, 2.0, 1.0])
    assert np.array_equal(F, -F.T) and not np.diag(F).any()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=8))
def test_build_F_antisymmetric(s):
    F, _ = build_F(sorted(s, reverse=True))
    assert np.array_equal(F, -F.T)
    assert np.all(np.diag(F) == 0.0) and np.all(np.isfinite(F))


# -- truncated backward ------------------------------------------------------------------

def test_truncated_examples(rng):
    H = low_rank_with_gaps(9, 5, 3, rng)
    f = exact_factors(H, 3)
    g = SvdGrads(np.ones(3), np.zeros((5, 3)))
    assert np.allclose(svd_backward_truncated(f, g), f.U @ f.V.T, atol=1e-14)
    g0 = SvdGrads(np.zeros(3), np.zeros((5, 3)))
    assert not svd_backward_truncated(f, g0).any()
    with pytest.raises(ValueError, match="recover_left_vectors"):
        svd_backward_truncated(randomized_svd(H, 3), g0)


@pytest.mark.parametrize("seed", range(5))
def test_truncated_matches_finite_differences(seed):
    rng = make_rng(seed)
    r = 3
    H = low_rank_with_gaps(10, 6, r, rng, ratio=1.5)
    W = rng.standard_normal((r, 6))

    def loss(X):
        f = randomized_svd(X, r, n_iter=6, rng=0)
        return float(np.sum(W * (f.s[:, None] * f.V.T)))

    f = exact_factors(H, r)
    g = chain_to_factors(W, f.V, f.s)
    analytic = svd_backward_truncated(f, g)
    numeric = tangent_projection(H, r, numeric_grad(loss, H))
    assert rel(analytic, numeric) <= 1e-4


def test_clamped_pair_stays_finite(rng):
    U = np.linalg.qr(rng.standard_normal((6, 2)))[0]
    V = np.linalg.qr(rng.standard_normal((4, 2)))[0]
    H = U @ V.T  # s = [1, 1]
    f = exact_factors(H, 2)
    g = chain_to_factors(rng.standard_normal((2, 4)), f.V, f.s)
    dH = svd_backward_truncated(f, g)
    assert g.clamped_pairs == 1 and np.all(np.isfinite(dH))
    # along a perturbation that keeps the degenerate subspace (scaling H)
    # the loss sum(s) changes by tr(U^T dH V), which the gradient reproduces
    g = chain_to_factors(f.V.T, f.V, f.s)
    dH = svd_backward_truncated(f, g)
    eps = 1e-6
    fd = (randomized_svd(H * (1 + eps), 2).s.sum() - randomized_svd(H * (1 - eps), 2).s.sum()) / (2 * eps)
    assert abs(np.sum(dH * H) - fd) <= 1e-6


# -- full oracle and bias -------------------------------------------------------------------

def test_full_oracle_on_exact_rank(rng):
    r = 3
    H = low_rank_with_gaps(9, 6, r, rng)
    f = exact_factors(H, r)
    g = chain_to_factors(rng.standard_normal((r, 6)), f.V, f.s)
    full = svd_backward_full_oracle(H, g, r)
    trunc = svd_backward_truncated(f, g)
    E, _ = bias_term(H, f, g)
    assert rel(full - trunc, E) <= 1e-8
    # with bar_V inside span(V) the cross block vanishes and the two agree
    g_in = SvdGrads(g.bar_sigma, f.V @ rng.standard_normal((r, r)))
    assert rel(svd_backward_full_oracle(H, g_in, r), svd_backward_truncated(f, g_in)) <= 1e-8
    zero = SvdGrads(np.zeros(r), np.zeros((6, r)))
    assert not svd_backward_full_oracle(H, zero, r).any()


def test_full_oracle_near_low_rank_matches_bias(rng):
    r = 3
    for seed in range(5):
        rng = make_rng(seed)
        U = np.linalg.qr(rng.standard_normal((12, 6)))[0]
        V = np.linalg.qr(rng.standard_normal((6, 6)))[0]
        s = np.array([5.0, 3.0, 2.0, 2e-6, 1e-6, 5e-7])
        H = (U * s) @ V.T
        f = recover_left_vectors(H, randomized_svd(H, r, n_iter=6, rng=0), eps_rel=1e-12)
        g = chain_to_factors(rng.standard_normal((r, 6)), f.V, f.s)
        diff = svd_backward_full_oracle(H, g, r) - svd_backward_truncated(f, g)
        E, bound = bias_term(H, f, g)
        assert np.linalg.norm(diff - E) <= 0.01 * np.linalg.norm(E) + 1e-8
        assert np.linalg.norm(E) <= bound * (1 + 1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_bias_bound_holds(seed, r):
    rng = make_rng(seed)
    H = rng.standard_normal((10, 6))
    # the inequality is about exact factors (orthonormal U)
    dec = svd_dense(H)
    f = SvdFactors(s=dec.s[:r], V=dec.V[:, :r], U=dec.U[:, :r])
    g = chain_to_factors(rng.standard_normal((f.s.size, 6)), f.V, f.s)
    E, bound = bias_term(H, f, g)
    assert np.linalg.norm(E) <= bound * (1 + 1e-12)


def test_bias_examples(rng):
    H = low_rank_with_gaps(8, 5, 2, rng)
    f = exact_factors(H, 2)
    g = SvdGrads(np.ones(2), f.V @ rng.standard_normal((2, 2)))
    E, bound = bias_term(H, f, g)
    assert np.max(np.abs(E)) <= 1e-14 and bound <= 1e-14
    tiny = f.__class__(s=np.array([1.0, 1e-8]), V=f.V, U=f.U)
    with pytest.raises(ValueError, match="clamp"):
        bias_term(H, tiny, g)


# -- pipeline --------------------------------------------------------------------------------

def test_pipeline_zero_upstream_and_wrong_cache(rng):
    inst = make_instance(0)
    res = attn_svd(inst.H, inst.C, inst.W_Q, inst.W_K, inst.W_V, inst.cfg)
    grads = pipeline_backward(res.cache, np.zeros_like(res.out))
    assert all(not g.any() for g in grads.values())
    lin = attend(inst.H, inst.C, inst.W_Q, inst.W_K, inst.W_V, AttnConfig("linear"))
    with pytest.raises(ValueError):
        pipeline_backward(lin.cache, np.zeros_like(res.out))


@pytest.mark.parametrize("softmax", [True, False])
def test_pipeline_tiny_instance_sum_loss(softmax):
    inst = make_instance(3, seed=5, n_l=6, n_c=2, d=4, r=2, apply_softmax=softmax)
    inst.G_out = np.ones_like(inst.G_out)
    reports, span = check_instance(inst)
    for rep in reports:
        assert rep.max_rel_err <= 1e-4, rep.block
    assert span <= 1e-10


def test_pipeline_matches_linear_attention_gradient(rng):
    H = low_rank_with_gaps(10, 4, 2, rng)
    C = rng.standard_normal((3, 4))
    I = np.eye(4)
    G = rng.standard_normal((3, 4))
    svd = attn_svd(H, C, I, I, I, AttnConfig("svd", rank=2, apply_softmax=False))
    lin = attend(H, C, I, I, I, AttnConfig("linear"))
    assert rel(pipeline_backward(svd.cache, G)["C"], attention_backward(lin.cache, G)["C"]) <= 1e-6


def test_gradient_suite_span_and_accuracy():
    for _, reports, span in gradient_suite(6, seed=11):
        assert max(r.max_rel_err for r in reports) <= 1e-4
        assert span <= 1e-10


def test_corrupted_F_sign_is_detected(monkeypatch):
    real = autodiff.build_F
    monkeypatch.setattr(autodiff, "build_F", lambda s, clamp_eps=1e-9: (-real(s, clamp_eps)[0], 0))
    reports, _ = check_instance(make_instance(0))
    assert {r.block: r.max_rel_err for r in reports}["H"] > 1e-2
