"""Single-head cross attention from candidates (queries) to history.

Three variants share one calling convention:

* ``softmax``: ``softmax(Q K^T * scale) V``, cost O(N_C N_L d)
* ``linear``:  ``Q (K^T V)``, cost O((N_C + N_L) d^2)
* ``svd``:     ``softmax(Q Key_r^T * scale) Value_r`` with
  ``Key_r = (V S)^T W_K`` and ``Value_r = (V S)^T W_V`` built from the
  rank-r factors of ``H``, cost O((N_C + N_L) d r)

All functions accept stacked inputs (leading batch dims).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .linalg import ShapeError, check_matrix, mT, softmax_rows
from .randsvd import DEFAULT_N_ITER, SvdFactors, _check_rank, _randomized_svd, randomized_svd

VARIANTS = ("softmax", "linear", "svd")


@dataclass(frozen=True)
class AttnConfig:
    variant: str = "svd"
    rank: int = 8
    n_iter: int = DEFAULT_N_ITER
    apply_softmax: bool = True
    scale: float | None = None  # None means 1/sqrt(d)
    seed: int = 0
    stabilized: bool = False
    cache: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "svd" and self.rank < 1:
            raise ValueError("rank must be >= 1 for the svd variant")
        if self.scale is not None and not self.scale > 0:
            raise ValueError("scale must be positive")

    def resolve_scale(self, d):
        return 1.0 / math.sqrt(d) if self.scale is None else float(self.scale)


@dataclass
class AttnCache:
    variant: str
    scale: float
    apply_softmax: bool
    Query: np.ndarray
    Key: np.ndarray | None = None
    Value: np.ndarray | None = None
    probs: np.ndarray | None = None
    # svd-only
    H: np.ndarray | None = None
    C: np.ndarray | None = None
    W_Q: np.ndarray | None = None
    W_K: np.ndarray | None = None
    W_V: np.ndarray | None = None
    factors: SvdFactors | None = None
    P: np.ndarray | None = None  # diag(s) V^T
    extra: dict = field(default_factory=dict)


@dataclass
class AttnOutput:
    out: np.ndarray
    cache: AttnCache | None


def _check_weights(d, *Ws):
    for W in Ws:
        if W.shape[-2:] != (d, d):
            raise ShapeError("weights must be d x d", W.shape, (d, d))


def project(H, C, W_Q, W_K, W_V):
    """``(C W_Q, H W_K, H W_V)``."""
    H = check_matrix(H, "H")
    C = check_matrix(C, "C")
    d = H.shape[-1]
    if C.shape[-1] != d:
        raise ShapeError("H and C embedding dims differ", H.shape, C.shape)
    W_Q, W_K, W_V = (check_matrix(W, "W") for W in (W_Q, W_K, W_V))
    _check_weights(d, W_Q, W_K, W_V)
    return C @ W_Q, H @ W_K, H @ W_V


def _check_qkv(Query, Key, Value):
    if Query.shape[-1] != Key.shape[-1] or Key.shape[-2] != Value.shape[-2]:
        raise ShapeError("query/key/value shapes disagree", Query.shape, Key.shape, Value.shape)


def attn_softmax(Query, Key, Value, scale=None, cache=True):
    Query, Key, Value = (np.asarray(x, dtype=np.float64) for x in (Query, Key, Value))
    _check_qkv(Query, Key, Value)
    if scale is None:
        scale = 1.0 / np.sqrt(Query.shape[-1])
    probs = softmax_rows(Query @ mT(Key), scale)
    out = probs @ Value
    if not cache:
        return AttnOutput(out, None)
    return AttnOutput(out, AttnCache("softmax", scale, True, Query, Key, Value, probs))


def attn_linear(Query, Key, Value, cache=True):
    """``Query (Key^T Value)``; no feature map, no normalization."""
    Query, Key, Value = (np.asarray(x, dtype=np.float64) for x in (Query, Key, Value))
    _check_qkv(Query, Key, Value)
    out = Query @ (mT(Key) @ Value)
    if not cache:
        return AttnOutput(out, None)
    return AttnOutput(out, AttnCache("linear", 1.0, False, Query, Key, Value))


def svd_keys_values(factors, W_K, W_V):
    """``(P, Key_r, Value_r)`` with ``P = diag(s) V^T``."""
    P = factors.s[..., :, None] * mT(factors.V)
    return P, P @ W_K, P @ W_V


def attn_svd(H, C, W_Q, W_K, W_V, cfg=None, rng=None, factors=None):
    """SVD-attention of candidates ``C`` over history ``H``.

    ``rng`` overrides ``cfg.seed`` for the sketch; precomputed ``factors``
    skip the factorization entirely.
    """
    cfg = cfg or AttnConfig()
    H = check_matrix(H, "H")
    C = check_matrix(C, "C")
    d = H.shape[-1]
    if C.shape[-1] != d:
        raise ShapeError("H and C embedding dims differ", H.shape, C.shape)
    _check_weights(d, W_Q, W_K, W_V)
    if factors is None:
        _check_rank(H, cfg.rank)
        factors = _randomized_svd(H, cfg.rank, cfg.n_iter, cfg.seed if rng is None else rng, cfg.stabilized)
    scale = cfg.resolve_scale(d)
    P, Key_r, Value_r = svd_keys_values(factors, W_K, W_V)
    if not cfg.cache:
        # C (W_Q Key_r^T) costs N d r instead of N d^2 and Query is not kept
        S = C @ (W_Q @ mT(Key_r))
        probs = softmax_rows(S, scale) if cfg.apply_softmax else S
        return AttnOutput(probs @ Value_r, None)
    Query = C @ W_Q
    S = Query @ mT(Key_r)
    probs = softmax_rows(S, scale) if cfg.apply_softmax else S
    out = probs @ Value_r
    cache = AttnCache(
        "svd", scale, cfg.apply_softmax, Query, Key_r, Value_r, probs,
        H=H, C=C, W_Q=W_Q, W_K=W_K, W_V=W_V, factors=factors, P=P,
    )
    return AttnOutput(out, cache)


def attend(H, C, W_Q, W_K, W_V, cfg, rng=None):
    """Run the variant named in ``cfg`` from raw inputs and weights."""
    if cfg.variant == "svd":
        return attn_svd(H, C, W_Q, W_K, W_V, cfg, rng=rng)
    Query, Key, Value = project(H, C, W_Q, W_K, W_V)
    if cfg.variant == "softmax":
        res = attn_softmax(Query, Key, Value, cfg.resolve_scale(H.shape[-1]), cache=cfg.cache)
    else:
        res = attn_linear(Query, Key, Value, cache=cfg.cache)
    if res.cache is not None:
        res.cache.H, res.cache.C = H, C
        res.cache.W_Q, res.cache.W_K, res.cache.W_V = W_Q, W_K, W_V
    return res


def _softmax_back(probs, d_probs):
    return probs * (d_probs - np.sum(d_probs * probs, axis=-1, keepdims=True))


def qkv_backward(cache, G_out):
    """Gradients w.r.t. (Query, Key, Value) for the softmax and linear variants."""
    Q, K, V = cache.Query, cache.Key, cache.Value
    if cache.variant == "softmax":
        dV = mT(cache.probs) @ G_out
        dS = cache.scale * _softmax_back(cache.probs, G_out @ mT(V))
        return dS @ K, mT(dS) @ Q, dV
    if cache.variant == "linear":
        KV = mT(K) @ V
        dKV = mT(Q) @ G_out
        return G_out @ mT(KV), V @ mT(dKV), K @ dKV
    raise ValueError(f"no q/k/v backward for variant {cache.variant!r}")


def _bsum(G, ndim):
    # reduce broadcast batch dims of a weight gradient
    extra = G.ndim - ndim
    return G.sum(axis=tuple(range(extra))) if extra > 0 else G


def attention_backward(cache, G_out):
    """Gradients for ``{H, C, W_Q, W_K, W_V}`` from any variant's cache.

    The svd variant routes the history gradient through the truncated-SVD
    backward (see :mod:`solar.autodiff`).
    """
    if cache is None:
        raise ValueError("attention was run with cache disabled")
    if cache.variant == "svd":
        from .autodiff import pipeline_backward

        return pipeline_backward(cache, G_out)
    dQ, dK, dV = qkv_backward(cache, G_out)
    H, C = cache.H, cache.C
    return {
        "H": dK @ mT(cache.W_K) + dV @ mT(cache.W_V),
        "C": dQ @ mT(cache.W_Q),
        "W_Q": _bsum(mT(C) @ dQ, cache.W_Q.ndim),
        "W_K": _bsum(mT(H) @ dK, cache.W_K.ndim),
        "W_V": _bsum(mT(H) @ dV, cache.W_V.ndim),
    }


class SVDAttention(TransformerMixin, BaseEstimator):
    """``fit(H)`` factors the history once; ``transform(C)`` attends the
    candidate rows of ``C`` over it.

    Weights default to identity.  ``scale=None`` means ``1/sqrt(d)``.
    """

    def __init__(self, rank=8, n_iter=DEFAULT_N_ITER, apply_softmax=True, scale=None,
                 stabilized=False, W_Q=None, W_K=None, W_V=None, random_state=0):
        self.rank = rank
        self.n_iter = n_iter
        self.apply_softmax = apply_softmax
        self.scale = scale
        self.stabilized = stabilized
        self.W_Q = W_Q
        self.W_K = W_K
        self.W_V = W_V
        self.random_state = random_state

    def _weights(self, d):
        return tuple(np.eye(d) if W is None else check_matrix(W, "W", allow_batch=False)
                     for W in (self.W_Q, self.W_K, self.W_V))

    def fit(self, H, y=None):
        H = check_array(H, dtype=np.float64)
        d = H.shape[1]
        self.config_ = AttnConfig("svd", self.rank, self.n_iter, self.apply_softmax, self.scale,
                                  self.random_state, self.stabilized)
        W_Q, W_K, W_V = self._weights(d)
        _check_weights(d, W_Q, W_K, W_V)
        self.factors_ = randomized_svd(H, self.rank, self.n_iter, rng=self.random_state,
                                       stabilized=self.stabilized)
        _, self.key_r_, self.value_r_ = svd_keys_values(self.factors_, W_K, W_V)
        self.n_features_in_ = d
        self._W_Q = W_Q
        return self

    def transform(self, C):
        check_is_fitted(self, "factors_")
        C = check_array(C, dtype=np.float64)
        if C.shape[1] != self.n_features_in_:
            raise ShapeError("feature count differs from fit", C.shape, (None, self.n_features_in_))
        S = (C @ self._W_Q) @ self.key_r_.T
        scale = self.config_.resolve_scale(self.n_features_in_)
        weights = softmax_rows(S, scale) if self.apply_softmax else S
        return weights @ self.value_r_
