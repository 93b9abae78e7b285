"""Randomized rank-r SVD with power iteration.

The routine follows the textbook range finder literally: a Gaussian sketch
``Omega`` (d x r), ``n_iter`` applications of ``H^T H``, one QR of
``H @ Omega``, and an exact SVD of the small r x d matrix ``Q^T H``.
Only ``s`` and the right vectors are produced; left vectors are recovered
on demand for the backward pass.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .linalg import ShapeError, check_matrix, make_rng, mT, qr_thin, sign_fix

DEFAULT_N_ITER = 4


@dataclass(frozen=True)
class SvdFactors:
    """Truncated factors of a (possibly stacked) matrix ``H ~ U diag(s) V^T``.

    ``s`` has shape (..., r), ``V`` (..., d, r), ``U`` (..., N, r) or None.
    ``active`` marks components kept by :func:`recover_left_vectors`; for
    stacked input dropped components stay in place with zeroed ``U`` columns.
    """

    s: np.ndarray
    V: np.ndarray
    U: np.ndarray | None = None
    n_iter: int = 0
    degenerate: bool = False
    active: np.ndarray | None = None

    @property
    def rank(self):
        if self.active is None:
            return self.s.shape[-1]
        return int(np.min(self.active.sum(axis=-1)))


def _check_rank(H, rank):
    n, d = H.shape[-2:]
    if not 1 <= rank <= min(n, d):
        raise ValueError(f"rank must be in [1, {min(n, d)}] for H of shape {H.shape[-2:]}, got {rank}")


def randomized_svd(H, rank, n_iter=DEFAULT_N_ITER, rng=None, stabilized=False):
    """Rank-``rank`` factors of ``H`` (shape (..., N_L, d)).

    ``rng`` is a seed or ``numpy.random.Generator``.  With ``stabilized`` the
    sketch is re-orthonormalized after every power step, which keeps large
    ``n_iter`` from overflowing or collapsing onto the top vector.

    An all-zero ``H`` returns zero singular values, canonical basis columns
    for ``V`` and ``degenerate=True``.
    """
    H = check_matrix(H, "H")
    _check_rank(H, rank)
    if n_iter < 0:
        raise ValueError("n_iter must be >= 0")
    return _randomized_svd(H, rank, n_iter, rng, stabilized)


@lru_cache(maxsize=64)
def _seeded_sketch(seed, shape):
    Omega = make_rng(seed).standard_normal(shape)
    Omega.flags.writeable = False
    return Omega


def _sketch(rng, shape):
    # an integer seed always yields the same draw, so keep it around
    if rng is None or isinstance(rng, (int, np.integer)):
        return _seeded_sketch(int(rng or 0), shape)
    return make_rng(rng).standard_normal(shape)


def _orth(Y):
    if Y.ndim > 2:
        return np.linalg.qr(Y)[0]
    # Householder QR straight from LAPACK; the wrappers cost more than the
    # factorization for the tall-skinny sketches used here
    qr, tau, _, info = _geqrf(Y)
    Q, _, info2 = _orgqr(qr[:, :Y.shape[1]], tau)
    if info or info2:
        raise np.linalg.LinAlgError("QR of the sketch failed")
    return Q


def _small_svd_t(Bt):
    """SVD of ``B`` given ``B^T`` (d x r): returns ``(s, V)`` with ``V`` the
    right vectors of ``B``.  The tall orientation is the cheaper LAPACK call."""
    if Bt.ndim > 2:
        V, s, _ = np.linalg.svd(Bt, full_matrices=False)
        return s, V
    V, s, _, info = _gesdd(Bt, compute_uv=1, full_matrices=0)
    if info:
        raise np.linalg.LinAlgError("SVD of the projected matrix did not converge")
    return s, V


_geqrf, _orgqr, _gesdd = scipy.linalg.get_lapack_funcs(("geqrf", "orgqr", "gesdd"), dtype=np.float64)


def _randomized_svd(H, rank, n_iter, rng, stabilized):
    # H already validated (finite float64, rank in range)
    batch = H.shape[:-2]
    d = H.shape[-1]

    Omega = _sketch(rng, (*batch, d, rank))
    Ht = mT(H)
    # (H^T H) Omega == H^T (H Omega); the Gram form reads H once instead of
    # 2 * n_iter times and is picked when it costs no more flops
    gram = Ht @ H if n_iter and d <= 2 * n_iter * rank else None
    for _ in range(n_iter):
        Omega = gram @ Omega if gram is not None else Ht @ (H @ Omega)
        if stabilized:
            Omega = qr_thin(Omega).Q
    if not np.isfinite(Omega.sum()):
        raise FloatingPointError("power iteration overflowed; use stabilized=True or fewer iterations")
    # any orthonormal basis of range(H Omega) will do here: column signs wash
    # out in the small SVD, and Householder Q stays orthonormal when the
    # sketch is rank deficient
    Y = H @ Omega
    Q = _orth(Y)
    s, V = _small_svd_t(Ht @ Q)  # B^T = H^T Q
    V, _ = sign_fix(V)

    zero = s[..., 0] == 0
    if np.count_nonzero(zero):
        zero = zero & np.all(H == 0, axis=(-2, -1))
    degenerate = bool(np.any(zero))
    if degenerate:
        s = np.where(zero[..., None], 0.0, s)
        V = np.where(zero[..., None, None], np.eye(d, rank), V)
    return SvdFactors(s=s, V=V, n_iter=n_iter, degenerate=degenerate)


def left_vectors(H, s, V, eps_rel=1e-9):
    """``U = H V diag(1/s)`` with columns for ``s_i < eps_rel * s_1`` zeroed.

    Returns ``(U, active)``; shapes follow the (possibly stacked) inputs.
    """
    s1 = s[..., :1]
    active = s > eps_rel * s1
    safe = np.where(active, s, 1.0)
    U = (H @ V) / safe[..., None, :]
    U = np.where(active[..., None, :], U, 0.0)
    return U, active


def recover_left_vectors(H, f, eps_rel=1e-9):
    """Attach left singular vectors to ``f``.

    For a single matrix, components with ``s_i < eps_rel * s_1`` are dropped
    and the rank shrinks accordingly.  For stacked input the shapes are kept
    and the dropped components are recorded in ``active``.
    """
    H = check_matrix(H, "H")
    if H.shape[-1] != f.V.shape[-2]:
        raise ShapeError("factors do not belong to H", H.shape, f.V.shape)
    U, active = left_vectors(H, f.s, f.V, eps_rel)
    if H.ndim == 2:
        keep = np.flatnonzero(active)
        return replace(f, s=f.s[keep], V=f.V[:, keep], U=U[:, keep], active=None)
    return replace(f, U=U, active=active)


class RandomizedSVD(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` factors a history matrix, ``transform``
    projects rows onto the right singular vectors.

    Attributes set by ``fit``: ``singular_values_``, ``components_`` (r x d,
    rows are right singular vectors), ``factors_`` and ``n_features_in_``.
    """

    def __init__(self, rank=8, n_iter=DEFAULT_N_ITER, stabilized=False, random_state=0):
        self.rank = rank
        self.n_iter = n_iter
        self.stabilized = stabilized
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.factors_ = randomized_svd(
            X, self.rank, self.n_iter, rng=self.random_state, stabilized=self.stabilized
        )
        self.singular_values_ = self.factors_.s
        self.components_ = self.factors_.V.T
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError("feature count differs from fit", X.shape, (None, self.n_features_in_))
        return X @ self.components_.T

    def inverse_transform(self, Z):
        check_is_fitted(self, "components_")
        return np.asarray(Z, dtype=np.float64) @ self.components_
