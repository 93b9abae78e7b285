"""Synthetic request streams with low-rank item embeddings and
context-dependent relevance.

Relevance of candidate ``i`` in candidate set ``X`` for user vector ``u``::

    eta*(i, X) = logistic(c0 + a <u, x_i> - b max_{j != i} cos(x_i, x_j))

The penalty term makes an item less attractive when a near-duplicate sits
next to it, so the relative order of two items can reverse between
candidate sets.  ``b = 0`` gives a purely point-wise ground truth.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .fileio import atomic_write_text
from .linalg import make_rng


@dataclass(frozen=True)
class FlipSpec:
    a: float = 2.0
    b: float = 4.0
    shared_component_strength: float = 0.0  # ||c|| / ||d_k||; 0 disables clustering
    intercept: float = 0.0
    user_noise: float = 0.1
    taste_concentration: float = 8.0

    def __post_init__(self):
        if self.a < 0 or self.b < 0:
            raise ValueError("a and b must be non-negative")
        if self.shared_component_strength < 0:
            raise ValueError("shared_component_strength must be non-negative")


@dataclass
class ItemCatalog:
    vocab_size: int
    dim: int
    true_rank: int
    embeddings: np.ndarray
    cluster: np.ndarray | None = None
    shared_strength: float = 0.0

    @property
    def n_clusters(self):
        return 0 if self.cluster is None else int(self.cluster.max()) + 1


@dataclass
class RankingInstance:
    user_id: int
    history: np.ndarray
    candidates: np.ndarray
    labels: np.ndarray
    eta_star: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, RankingInstance):
            return NotImplemented
        return (
            self.user_id == other.user_id
            and np.array_equal(self.history, other.history)
            and np.array_equal(self.candidates, other.candidates)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.eta_star, other.eta_star)
        )

    @property
    def positives(self):
        return np.flatnonzero(self.labels == 1)


def gen_catalog(vocab, d, r_star, seed=0, shared_strength=0.0, n_clusters=0):
    """Item embeddings ``A @ B`` with ``A`` (vocab x r*) and ``B`` (r* x d)
    Gaussian, ``B`` scaled so rows have unit expected norm.

    With ``shared_strength > 0`` items are split into ``n_clusters`` groups and
    every item gets its group's shared vector ``c`` (norm ``shared_strength``)
    added: ``x_k = c + d_k``.  The rank bound then becomes ``r* + n_clusters``.
    """
    if not 1 <= r_star <= d:
        raise ValueError(f"true rank must be in [1, {d}], got {r_star}")
    rng = make_rng(seed)
    A = rng.standard_normal((vocab, r_star))
    B = rng.standard_normal((r_star, d)) / np.sqrt(r_star * d)
    emb = A @ B
    cluster = None
    if shared_strength > 0:
        if n_clusters < 1:
            raise ValueError("shared-component catalogs need n_clusters >= 1")
        centers = rng.standard_normal((n_clusters, d))
        centers *= shared_strength / np.linalg.norm(centers, axis=1, keepdims=True)
        cluster = np.arange(vocab) % n_clusters
        emb = emb + centers[cluster]
    return ItemCatalog(vocab, d, r_star, emb, cluster, float(shared_strength))


def max_neighbor_cosine(X):
    """For each row of ``X``, the largest cosine to any other row."""
    Xn = X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-300)
    cos = Xn @ Xn.T
    np.fill_diagonal(cos, -np.inf)
    return cos.max(axis=1)


def relevance(u, X, flip):
    """Ground-truth ``eta*`` for every row of candidate embeddings ``X``."""
    logits = flip.intercept + flip.a * (X @ u)
    if flip.b:
        logits = logits - flip.b * max_neighbor_cosine(X)
    return expit(logits)


def _sample_user(catalog, n_hist, flip, rng):
    emb = catalog.embeddings
    taste = emb[rng.integers(catalog.vocab_size)].copy()
    taste /= max(np.linalg.norm(taste), 1e-300)
    logits = flip.taste_concentration * (emb @ taste)
    p = np.exp(logits - logits.max())
    p /= p.sum()
    history = rng.choice(catalog.vocab_size, size=n_hist, replace=n_hist > catalog.vocab_size, p=p)
    u = emb[history].mean(axis=0) + flip.user_noise * rng.standard_normal(catalog.dim) / np.sqrt(catalog.dim)
    return history, u


def _sample_candidates(catalog, m, rng):
    if catalog.cluster is None:
        pool = catalog.vocab_size
        if m > pool:
            raise ValueError(f"m={m} exceeds the catalog size {pool}")
        return rng.choice(pool, size=m, replace=False)
    g = rng.integers(catalog.n_clusters)
    members = np.flatnonzero(catalog.cluster == g)
    if m > members.size:
        raise ValueError(f"m={m} exceeds the cluster size {members.size}")
    return rng.choice(members, size=m, replace=False)


def gen_instance(catalog, n_hist, m, flip, rng, user_id=0, ensure_both=False):
    """One request.  ``ensure_both`` redraws labels until the set holds at
    least one positive and one negative (skews calibration slightly)."""
    if m < 2 or n_hist < 1:
        raise ValueError("need m >= 2 and n_hist >= 1")
    rng = make_rng(rng)
    history, u = _sample_user(catalog, n_hist, flip, rng)
    cands = _sample_candidates(catalog, m, rng)
    eta = relevance(u, catalog.embeddings[cands], flip)
    labels = (rng.random(m) < eta).astype(np.int64)
    if ensure_both:
        for _ in range(1000):
            if 0 < labels.sum() < m:
                break
            labels = (rng.random(m) < eta).astype(np.int64)
    return RankingInstance(int(user_id), history.astype(np.int64), cands.astype(np.int64), labels, eta)


def gen_dataset(catalog, n_users, n_hist=50, m=50, flip=None, seed=0, ensure_both=False):
    flip = flip or FlipSpec()
    rng = make_rng(seed)
    return [gen_instance(catalog, n_hist, m, flip, rng, user_id=k, ensure_both=ensure_both)
            for k in range(n_users)]


def flip_fraction(catalog, flip, n_trials=200, m=50, n_hist=50, seed=0):
    """Fraction of item pairs whose ``eta*`` order differs between two
    candidate sets that share those items but differ in their other members.

    Each trial keeps half of the candidate slots fixed and redraws the rest.
    """
    rng = make_rng(seed)
    flips = pairs = 0
    core_n = m // 2
    for _ in range(n_trials):
        _, u = _sample_user(catalog, n_hist, flip, rng)
        first = _sample_candidates(catalog, m, rng)
        core = first[:core_n]
        pool = np.setdiff1d(np.arange(catalog.vocab_size) if catalog.cluster is None
                            else np.flatnonzero(catalog.cluster == catalog.cluster[core[0]]), core)
        second = np.concatenate([core, rng.choice(pool, size=m - core_n, replace=False)])
        e1 = relevance(u, catalog.embeddings[first], flip)[:core_n]
        e2 = relevance(u, catalog.embeddings[second], flip)[:core_n]
        d1 = np.sign(e1[:, None] - e1[None, :])
        d2 = np.sign(e2[:, None] - e2[None, :])
        iu = np.triu_indices(core_n, 1)
        flips += int(np.sum(d1[iu] * d2[iu] < 0))
        pairs += iu[0].size
    return flips / pairs


# -- persistence -------------------------------------------------------------

class DatasetFormatError(ValueError):
    def __init__(self, path, lineno, msg):
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {msg}")


def _ints(a):
    return ",".join(str(int(x)) for x in a)


def format_instance(inst):
    eta = ",".join(format(float(x), ".17g") for x in inst.eta_star)
    return "\t".join([str(inst.user_id), _ints(inst.history), _ints(inst.candidates), _ints(inst.labels), eta])


def parse_instance(line, path="<data>", lineno=0):
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 5:
        raise DatasetFormatError(path, lineno, f"expected 5 tab-separated fields, got {len(parts)}")
    try:
        user = int(parts[0])
        hist, cands, labels = (np.array([int(t) for t in p.split(",")], dtype=np.int64) for p in parts[1:4])
        eta = np.array([float(t) for t in parts[4].split(",")])
    except ValueError as exc:
        raise DatasetFormatError(path, lineno, str(exc)) from None
    if not (len(cands) == len(labels) == len(eta)):
        raise DatasetFormatError(path, lineno, "candidates, labels and eta_star lengths differ")
    if not np.all((labels == 0) | (labels == 1)):
        raise DatasetFormatError(path, lineno, "labels must be 0 or 1")
    if not np.all(np.isfinite(eta) & (eta >= 0) & (eta <= 1)):
        raise DatasetFormatError(path, lineno, "eta_star must lie in [0, 1]")
    return RankingInstance(user, hist, cands, labels, eta)


def write_dataset(path, instances):
    """One tab-separated record per line; returns the record count."""
    lines = [format_instance(inst) for inst in instances]
    atomic_write_text(path, "".join(ln + "\n" for ln in lines))
    return len(lines)


def read_dataset(path):
    path = str(path)
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.endswith("\n"):
                raise DatasetFormatError(path, lineno, "truncated record (no line terminator)")
            out.append(parse_instance(line, path, lineno))
    return out
