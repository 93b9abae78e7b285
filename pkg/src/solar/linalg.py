"""Dense float64 linear algebra and seeded randomness.

Every routine here works on plain ``numpy.ndarray`` values.  Routines that
are used on the training path (``matmul``, ``qr_thin``, ``softmax_rows``)
accept leading batch dimensions the same way ``numpy.linalg`` does;
``svd_dense`` is a test oracle and only takes a single matrix.
"""
from __future__ import annotations

from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.linalg

from .fileio import atomic_write_text


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, message, *shapes):
        self.shapes = shapes
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)


class NonFiniteError(ValueError):
    pass


def check_matrix(A, name="matrix", allow_batch=True):
    """Return ``A`` as a float64 array with at least two dims and finite entries."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim < 2 or (A.ndim > 2 and not allow_batch):
        raise ShapeError(f"{name} must be a {'(batched) ' if allow_batch else ''}matrix", A.shape)
    # a finite sum proves every entry finite; only overflow needs the full scan
    with np.errstate(over="ignore", invalid="ignore"):
        total = np.add.reduce(A, axis=None)
    if not np.isfinite(total) and not np.all(np.isfinite(A)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return A


def make_rng(seed=0):
    """Counter-based (Philox) generator; equal seeds give equal streams.

    ``seed`` may be an int, a sequence of ints (e.g. ``[seed, index]`` for
    independent sub-streams) or an existing Generator, returned as is.
    ``None`` means seed 0, so defaults stay reproducible.
    """
    if seed is None:
        seed = 0
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, (list, tuple)):
        return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(s) for s in seed])))
    return np.random.Generator(np.random.Philox(int(seed)))


def matmul(A, B):
    """``A @ B`` with a shape check that reports both operands."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim < 2 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise ShapeError("matmul inner dimensions differ", A.shape, B.shape)
    return A @ B


def mT(A):
    return A.swapaxes(-1, -2)


class QR(NamedTuple):
    Q: np.ndarray
    R: np.ndarray
    replaced: tuple  # column indices filled by basis completion (per matrix for batches)


def _dependent_cols(R, rtol):
    diag = np.abs(np.diagonal(R, axis1=-2, axis2=-1))
    scale = np.max(diag, axis=-1, keepdims=True)
    return diag <= rtol * np.maximum(scale, np.finfo(float).tiny)


def _qr_gram_schmidt(A, rtol):
    m, n = A.shape
    Q = np.zeros((m, n))
    R = np.zeros((n, n))
    replaced = []
    anorm = np.linalg.norm(A)
    for j in range(n):
        v = A[:, j].copy()
        for _ in range(2):
            c = Q[:, :j].T @ v
            v -= Q[:, :j] @ c
            R[:j, j] += c
        nv = np.linalg.norm(v)
        if nv > rtol * max(anorm, np.finfo(float).tiny):
            Q[:, j] = v / nv
            R[j, j] = nv
            continue
        # canonical completion: the unit vector least covered by the current basis
        basis = Q[:, :j]
        resid = 1.0 - np.sum(basis**2, axis=1)
        e = np.zeros(m)
        e[int(np.argmax(resid))] = 1.0
        for _ in range(2):
            e -= basis @ (basis.T @ e)
        Q[:, j] = e / np.linalg.norm(e)
        replaced.append(j)
    return Q, R, tuple(replaced)


def qr_thin(A, rtol=1e-12):
    """Thin QR with ``diag(R) >= 0``.

    Columns that are numerically dependent on earlier ones get ``R[j, j] = 0``
    and a completing orthonormal column in ``Q``; their indices are returned in
    ``replaced`` so callers can flag degeneracy.
    """
    A = check_matrix(A, "A")
    m, n = A.shape[-2:]
    if m < n:
        raise ShapeError("qr_thin needs rows >= cols", A.shape)
    if A.ndim == 2:
        # scipy's economic QR skips numpy's full reflector build; ~3x faster tall-skinny
        Q, R = scipy.linalg.qr(A, mode="economic", check_finite=False)
    else:
        Q, R = np.linalg.qr(A, mode="reduced")
    sign = np.where(np.diagonal(R, axis1=-2, axis2=-1) < 0, -1.0, 1.0)
    Q = Q * sign[..., None, :]
    R = R * sign[..., :, None]
    bad = _dependent_cols(R, rtol)
    if A.ndim == 2:
        if bad.any():
            return QR(*_qr_gram_schmidt(A, rtol))
        return QR(Q, R, ())
    replaced = []
    flat_A = A.reshape(-1, m, n)
    flat_Q = Q.reshape(-1, m, n)
    flat_R = R.reshape(-1, n, n)
    for k, row_bad in enumerate(bad.reshape(-1, n)):
        if row_bad.any():
            flat_Q[k], flat_R[k], rep = _qr_gram_schmidt(flat_A[k], rtol)
            replaced.append((k, rep))
    return QR(flat_Q.reshape(Q.shape), flat_R.reshape(R.shape), tuple(replaced))


def orthonormal_complement(Q):
    """Columns completing the orthonormal columns of ``Q`` to a basis."""
    m, n = Q.shape
    if n >= m:
        return np.zeros((m, 0))
    full, _ = np.linalg.qr(np.hstack([Q, np.eye(m)]), mode="reduced")
    comp = full[:, n:m]
    # drop any residual overlap so Q ⊕ comp is orthonormal to rounding
    comp -= Q @ (Q.T @ comp)
    comp, _ = np.linalg.qr(comp)
    return comp


def sign_fix(V, U=None):
    """Flip singular-vector pairs so each column of ``V`` has its
    largest-magnitude entry positive.  Works on stacked matrices."""
    if V.ndim == 2:
        pivot = V[np.abs(V).argmax(axis=0), np.arange(V.shape[1])]
    else:
        idx = np.argmax(np.abs(V), axis=-2)[..., None, :]
        pivot = np.take_along_axis(V, idx, axis=-2)
    # pivots are the largest-magnitude entries, so they are nonzero unless
    # the whole column is; copysign then leaves it alone
    flip = np.copysign(1.0, pivot)
    flip[pivot == 0] = 1.0
    V = V * flip
    if U is not None:
        U = U * flip
    return V, U


class DenseSVD(NamedTuple):
    U: np.ndarray
    s: np.ndarray
    V: np.ndarray
    sweeps: int


def svd_dense(A, tol=None, max_sweeps=60):
    """One-sided (Hestenes) Jacobi SVD of a single matrix.

    For ``A`` of shape (m, n) with m >= n the result has U (m, n) and V (n, n);
    wide matrices are handled through the transpose, giving U (m, m), V (n, m).
    Singular values are descending and each right vector has its
    largest-magnitude entry positive.
    """
    A = check_matrix(A, "A", allow_batch=False)
    m, n = A.shape
    if m < n:
        r = svd_dense(A.T, tol, max_sweeps)
        U, V = r.V, r.U
        V, U = sign_fix(V, U)
        return DenseSVD(U, r.s, V, r.sweeps)

    if tol is None:
        tol = m * np.finfo(float).eps
    W = A.copy()
    V = np.eye(n)
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                wp, wq = W[:, p], W[:, q]
                alpha = wp @ wp
                beta = wq @ wq
                gamma = wp @ wq
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                W[:, [p, q]] = np.column_stack([c * wp - s * wq, s * wp + c * wq])
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
        if not rotated:
            break

    sv = np.linalg.norm(W, axis=0)
    order = np.argsort(-sv, kind="stable")
    sv, W, V = sv[order], W[:, order], V[:, order]
    U = np.zeros((m, n))
    cutoff = max(sv[0] if n else 0.0, np.finfo(float).tiny) * m * np.finfo(float).eps
    live = sv > cutoff
    U[:, live] = W[:, live] / sv[live]
    sv = np.where(live, sv, 0.0)
    if not live.all():
        k = int(live.sum())
        U[:, k:] = orthonormal_complement(U[:, :k])[:, : n - k]
    V, U = sign_fix(V, U)
    return DenseSVD(U, sv, V, sweeps)


def softmax_rows(S, scale=1.0):
    """Row-wise softmax of ``scale * S`` along the last axis, max-shifted."""
    Z = scale * np.asarray(S, dtype=np.float64)  # fresh array, safe to modify
    Z -= np.maximum.reduce(Z, axis=-1, keepdims=True)
    np.exp(Z, out=Z)
    Z /= np.add.reduce(Z, axis=-1, keepdims=True)
    return Z


def _fmt(x):
    return format(float(x), ".17g")


def format_row(values):
    """Comma-separated values at 17 significant digits (exact round trip)."""
    return ",".join(_fmt(x) for x in values)


def matrix_csv_text(A):
    """First line ``rows,cols``; then one comma-separated row per line."""
    A = check_matrix(A, "A", allow_batch=False)
    return "\n".join([f"{A.shape[0]},{A.shape[1]}"] + [format_row(row) for row in A]) + "\n"


def write_matrix_csv(path, A):
    atomic_write_text(path, matrix_csv_text(A))


def read_matrix_csv(path):
    text = Path(path).read_text().splitlines()
    if not text:
        raise ValueError(f"{path}: empty matrix file")
    try:
        rows, cols = (int(t) for t in text[0].split(","))
    except ValueError as exc:
        raise ValueError(f"{path}:1: header must be 'rows,cols'") from exc
    body = [ln for ln in text[1:] if ln.strip()]
    if len(body) != rows:
        raise ValueError(f"{path}: header says {rows} rows, found {len(body)}")
    A = np.empty((rows, cols))
    for i, ln in enumerate(body):
        vals = ln.split(",")
        if len(vals) != cols:
            raise ValueError(f"{path}:{i + 2}: expected {cols} values, got {len(vals)}")
        A[i] = [float(v) for v in vals]
    return check_matrix(A, str(path), allow_batch=False)
