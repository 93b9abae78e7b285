"""Finite-difference checks of the svd-attention backward pass.

Instances have exactly rank-r histories with well separated singular values,
so the randomized factorization reproduces the exact truncated SVD and its
derivative is defined.  The history block is compared after projecting the
numeric gradient onto ``span(U) span(V)^T``, the subspace the truncated
backward covers (see :mod:`solar.autodiff`); every other block is compared
in full.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttnConfig, attn_svd
from .autodiff import GradReport, pipeline_backward
from .linalg import make_rng, svd_dense

BLOCKS = ("H", "C", "W_Q", "W_K", "W_V")


@dataclass
class GradInstance:
    ident: int
    H: np.ndarray
    C: np.ndarray
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    G_out: np.ndarray
    cfg: AttnConfig

    def inputs(self):
        return {"H": self.H, "C": self.C, "W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V}


def numeric_grad(fn, x, rel_step=1e-6):
    """Central differences with step ``rel_step * (1 + |x_k|)``; ``fn`` is
    evaluated on a perturbed copy of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        h = rel_step * (1.0 + abs(x[idx]))
        old = x[idx]
        x[idx] = old + h
        fp = fn(x)
        x[idx] = old - h
        fm = fn(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2.0 * h)
    return g


def low_rank_with_gaps(n, d, r, rng, ratio=1.3, top=None):
    """Exactly rank-``r`` matrix with ``s_i / s_{i+1} >= ratio``."""
    rng = make_rng(rng)
    top = top if top is not None else float(np.sqrt(n))
    s = top / ratio ** np.arange(r) * rng.uniform(0.9, 1.0)
    U, _ = np.linalg.qr(rng.standard_normal((n, r)))
    V, _ = np.linalg.qr(rng.standard_normal((d, r)))
    return (U * s) @ V.T


def make_instance(ident, seed=0, n_l=12, n_c=5, d=6, r=3, apply_softmax=None):
    """Instance ``ident`` of the suite; softmax alternates with ``ident``."""
    rng = make_rng([seed, ident])
    if apply_softmax is None:
        apply_softmax = ident % 2 == 0
    scale = 1.0 / np.sqrt(d)
    cfg = AttnConfig("svd", rank=r, n_iter=6, apply_softmax=apply_softmax, seed=int(ident))
    return GradInstance(
        ident=ident,
        H=low_rank_with_gaps(n_l, d, r, rng),
        C=rng.standard_normal((n_c, d)),
        W_Q=rng.standard_normal((d, d)) * scale,
        W_K=rng.standard_normal((d, d)) * scale,
        W_V=rng.standard_normal((d, d)) * scale,
        G_out=rng.standard_normal((n_c, d)),
        cfg=cfg,
    )


def _objective(inst, **override):
    args = {**inst.inputs(), **override}
    out = attn_svd(args["H"], args["C"], args["W_Q"], args["W_K"], args["W_V"], inst.cfg).out
    return float(np.sum(inst.G_out * out))


def _rel_err(a, n):
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), 1e-300))


def check_instance(inst, rel_step=1e-6):
    """Reports for every block plus the subspace residual of ``dH``.

    Returns ``(reports, span_residual)`` where ``span_residual`` is
    ``||dH - U U^T dH V V^T|| / ||dH||``.
    """
    res = attn_svd(inst.H, inst.C, inst.W_Q, inst.W_K, inst.W_V, inst.cfg)
    grads = pipeline_backward(res.cache, inst.G_out)
    clamped = res.cache.extra.get("clamped_pairs", 0)
    r = inst.cfg.rank
    dec = svd_dense(inst.H)
    U, V = dec.U[:, :r], dec.V[:, :r]
    reports = []
    for name in BLOCKS:
        num = numeric_grad(lambda x, name=name: _objective(inst, **{name: x}), getattr(inst, name), rel_step)
        if name == "H":
            num = U @ (U.T @ num @ V) @ V.T
        reports.append(GradReport(name, grads[name], num, _rel_err(grads[name], num), clamped))
    dH = grads["H"]
    span_res = float(np.linalg.norm(dH - U @ (U.T @ dH @ V) @ V.T) / max(np.linalg.norm(dH), 1e-300))
    return reports, span_res


def gradient_suite(n_instances=30, seed=0):
    """Yields ``(ident, reports, span_residual)`` for each instance."""
    for ident in range(n_instances):
        reports, span = check_instance(make_instance(ident, seed))
        yield ident, reports, span
