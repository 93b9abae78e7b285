"""Backward pass through the truncated SVD used by SVD-attention.

The forward pass only consumes ``P = diag(s) V^T``; ``U`` never appears, so
its upstream gradient is identically zero and the input gradient reduces to

    dL/dH = U [diag(bar_s) - 2 S sym(F o (V^T bar_V))] V^T,
    F_ij = 1 / (s_i^2 - s_j^2)  (i != j),  F_ii = 0.

This is the gradient restricted to the rank-r tangent directions
``U M V^T``.  For a general perturbation the exact derivative of the top-r
factors also contains ``U S^-1 bar_V^T (I - V V^T)``; :func:`bias_term`
returns that piece and :func:`svd_backward_full_oracle` reproduces the
full-spectrum gradient it approximates.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .attention import _bsum, _softmax_back
from .linalg import ShapeError, mT, orthonormal_complement, svd_dense
from .randsvd import left_vectors

DEFAULT_CLAMP_EPS = 1e-9


@dataclass
class SvdGrads:
    bar_sigma: np.ndarray  # (..., r)
    bar_V: np.ndarray  # (..., d, r)
    F: np.ndarray | None = None  # (..., r, r)
    clamped_pairs: int = 0


@dataclass
class GradReport:
    block: str
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_err: float
    clamped_pairs: int = 0


def sym(M):
    return 0.5 * (M + mT(M))


def chain_to_factors(G_P, V, s):
    """Split ``dL/dP`` for ``P = diag(s) V^T`` into ``(bar_sigma, bar_V)``."""
    G_P = np.asarray(G_P, dtype=np.float64)
    if G_P.shape[-2:] != (V.shape[-1], V.shape[-2]):
        raise ShapeError("G_P must be r x d", G_P.shape, mT(V).shape)
    bar_V = mT(G_P) * s[..., None, :]
    bar_sigma = np.einsum("...ij,...ji->...i", G_P, V)
    return SvdGrads(bar_sigma, bar_V)


def build_F(s, clamp_eps=DEFAULT_CLAMP_EPS):
    """``F_ij = 1/(s_i^2 - s_j^2)``, zero on the diagonal and for pairs whose
    squared gap falls below ``clamp_eps * s_1^2``.  Returns ``(F, n_clamped)``
    where ``n_clamped`` counts unordered pairs."""
    s = np.asarray(s, dtype=np.float64)
    s2 = s**2
    gap = s2[..., :, None] - s2[..., None, :]
    r = s.shape[-1]
    offdiag = ~np.eye(r, dtype=bool)
    thresh = clamp_eps * np.max(s2, axis=-1, keepdims=True)[..., None]
    live = (np.abs(gap) >= thresh) & offdiag & (np.abs(gap) > 0)
    F = np.zeros_like(gap)
    F[live] = 1.0 / gap[live]
    clamped = int(np.sum(offdiag & ~live)) // 2
    return F, clamped


def _core(s, bar_sigma, bar_V, V, F):
    J = mT(V) @ bar_V
    M = -2.0 * s[..., :, None] * sym(F * J)
    idx = np.arange(s.shape[-1])
    M[..., idx, idx] += bar_sigma
    return M


def svd_backward_truncated(f, g, clamp_eps=DEFAULT_CLAMP_EPS):
    """``dL/dH`` from the truncated factors ``f`` (with ``U``) and upstream
    ``g``; the result always lies in ``span(U) span(V)^T``."""
    if f.U is None:
        raise ValueError("factors carry no U; call recover_left_vectors(H, factors) first")
    if g.bar_V.shape != f.V.shape or g.bar_sigma.shape != f.s.shape:
        raise ShapeError("gradient shapes do not match factors", g.bar_V.shape, f.V.shape)
    F = g.F
    if F is None:
        F, g.clamped_pairs = build_F(f.s, clamp_eps)
        g.F = F
    return f.U @ _core(f.s, g.bar_sigma, g.bar_V, f.V, F) @ mT(f.V)


def svd_backward_full_oracle(H, g, r, clamp_eps=DEFAULT_CLAMP_EPS):
    """Reference gradient from the full SVD of ``H`` with ``bar_U = 0``
    everywhere and zero upstream on the complement (``bar_V_perp = 0``,
    ``bar_Sigma_perp = 0``).  Includes the cross blocks the truncated
    formula leaves out.  Uses the Jacobi SVD, independent of the sketch."""
    H = np.asarray(H, dtype=np.float64)
    n, d = H.shape
    dec = svd_dense(H)
    k = min(n, d)
    V = dec.V[:, :k]
    if V.shape[1] < d:
        V = np.hstack([V, orthonormal_complement(V)])
    s = np.zeros(d)
    s[:k] = dec.s[:k]
    U = np.zeros((n, d))
    U[:, :k] = dec.U[:, :k]

    bar_sigma = np.zeros(d)
    bar_sigma[:r] = g.bar_sigma
    bar_V = np.zeros((d, d))
    bar_V[:, :r] = g.bar_V
    F, _ = build_F(s, clamp_eps)
    return U @ _core(s, bar_sigma, bar_V, V, F) @ V.T


def bias_term(H, f, g, clamp_eps=DEFAULT_CLAMP_EPS):
    """Leading full-minus-truncated gradient ``E = U S^-1 bar_V^T (I - V V^T)``
    and its bound ``||bar_V^T (I - V V^T)||_F / s_r``."""
    if f.U is None:
        raise ValueError("factors carry no U; call recover_left_vectors(H, factors) first")
    s = f.s
    if s[-1] <= np.sqrt(clamp_eps) * s[0]:
        raise ValueError(f"smallest kept singular value {s[-1]:.3e} is below the clamp threshold")
    V = f.V
    orth = mT(g.bar_V) - (mT(g.bar_V) @ V) @ mT(V)
    E = (f.U / s) @ orth
    bound = np.linalg.norm(orth) / s[-1]
    return E, float(bound)


def pipeline_backward(cache, G_out, clamp_eps=DEFAULT_CLAMP_EPS, eps_rel=1e-9):
    """Gradients of the svd-attention pipeline for ``{H, C, W_Q, W_K, W_V}``.

    The history gradient goes ``G_P -> (bar_sigma, bar_V) -> dH`` through
    :func:`chain_to_factors` and :func:`svd_backward_truncated`; ``U`` is
    recovered from ``H`` here, not stored by the forward pass.
    """
    if cache is None or cache.variant != "svd":
        raise ValueError("pipeline_backward needs a cache produced by attn_svd")
    G_out = np.asarray(G_out, dtype=np.float64)
    Query, Key_r, Value_r, probs = cache.Query, cache.Key, cache.Value, cache.probs
    f = cache.factors

    d_weights = G_out @ mT(Value_r)
    dValue_r = mT(probs) @ G_out
    if cache.apply_softmax:
        dS = cache.scale * _softmax_back(probs, d_weights)
    else:
        dS = d_weights
    dQuery = dS @ Key_r
    dKey_r = mT(dS) @ Query

    G_P = dKey_r @ mT(cache.W_K) + dValue_r @ mT(cache.W_V)
    g = chain_to_factors(G_P, f.V, f.s)
    U, active = left_vectors(cache.H, f.s, f.V, eps_rel)
    dH = svd_backward_truncated(replace(f, U=U, active=active), g, clamp_eps)
    cache.extra["clamped_pairs"] = g.clamped_pairs
    return {
        "H": dH,
        "C": dQuery @ mT(cache.W_Q),
        "W_Q": _bsum(mT(cache.C) @ dQuery, cache.W_Q.ndim),
        "W_K": _bsum(mT(cache.P) @ dKey_r, cache.W_K.ndim),
        "W_V": _bsum(mT(cache.P) @ dValue_r, cache.W_V.ndim),
    }
