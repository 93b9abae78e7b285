"""SOLAR: SVD-attention over the user history plus candidate-set
self-attention, scored by a linear head.

For candidate embeddings ``C`` (m x d) and history embeddings ``H``::

    z = C + HistoryAttn(H, C) + SetAttn(C)        (each block optional)
    scores = z @ w

The history block is point-wise in the candidates (row ``i`` of its output
depends on ``c_i`` and ``H`` only); the set block lets every score depend on
the whole candidate set.  With both blocks off the model is a plain
point-wise scorer ``C @ w``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.special import expit, logsumexp, softmax
from sklearn.base import BaseEstimator

from .attention import AttnConfig, attend, attention_backward, attn_softmax, qkv_backward
from .linalg import make_rng, mT
from .metrics import auc, grouped_auc, mean_risk

log = logging.getLogger(__name__)

BLOCKS = {
    "both": (True, True),
    "history": (True, False),
    "candidates": (False, True),
    "none": (False, False),
}
LOSSES = ("listwise", "pointwise-bce", "pairwise-bce")
_WEIGHTS = ("W_Q", "W_K", "W_V", "S_Q", "S_K", "S_V")


@dataclass
class SolarParams:
    emb: np.ndarray
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    S_Q: np.ndarray
    S_K: np.ndarray
    S_V: np.ndarray
    w: np.ndarray
    config: AttnConfig = field(default_factory=AttnConfig)
    history_block: bool = True
    set_block: bool = True
    train_embeddings: bool = True
    normalize: bool = False

    @property
    def dim(self):
        return self.emb.shape[1]

    def arrays(self):
        names = ["w", *_WEIGHTS]
        if self.train_embeddings:
            names.append("emb")
        return {n: getattr(self, n) for n in names}

    def copy(self):
        return replace(self, **{f.name: getattr(self, f.name).copy()
                                for f in fields(self) if isinstance(getattr(self, f.name), np.ndarray)})

    @property
    def head_norm(self):
        return float(np.linalg.norm(self.w))


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    loss: str = "listwise"

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, params, history):
        super().__init__(f"non-finite loss in epoch {epoch}; returning last good parameters")
        self.params = params
        self.history = history


def init_params(vocab_size, dim, config=None, blocks="both", seed=0, embeddings=None,
                train_embeddings=True, normalize=False):
    """Random initial parameters.  ``embeddings`` (vocab x dim) replaces the
    random table, e.g. with a pretrained catalog."""
    config = config or AttnConfig()
    hist, cand = BLOCKS[blocks]
    rng = make_rng(seed)
    scale = 1.0 / np.sqrt(dim)
    if embeddings is None:
        emb = rng.standard_normal((vocab_size, dim)) * scale
    else:
        emb = np.array(embeddings, dtype=np.float64)
        if emb.shape != (vocab_size, dim):
            raise ValueError(f"embeddings must be {(vocab_size, dim)}, got {emb.shape}")
    mats = {n: rng.standard_normal((dim, dim)) * scale for n in _WEIGHTS}
    # value maps start at zero: every block begins as an identity residual,
    # so all configurations start from the same point-wise scorer
    mats["W_V"][:] = 0.0
    mats["S_V"][:] = 0.0
    w = rng.standard_normal(dim) * scale
    return SolarParams(emb=emb, w=w, config=config, history_block=hist, set_block=cand,
                       train_embeddings=train_embeddings, normalize=normalize, **mats)


# -- forward / backward -------------------------------------------------------

def _check_ids(params, *ids):
    V = params.emb.shape[0]
    for a in ids:
        if a.size and (a.min() < 0 or a.max() >= V):
            raise IndexError(f"item id out of range [0, {V})")


def forward_batch(params, hist_ids, cand_ids, rng=None):
    """Scores (B, m) and a cache for :func:`backward_batch`.

    ``hist_ids`` is (B, N_L), ``cand_ids`` (B, m).
    """
    hist_ids = np.asarray(hist_ids)
    cand_ids = np.asarray(cand_ids)
    _check_ids(params, hist_ids, cand_ids)
    scores, cache = forward_embedded(params, params.emb[hist_ids], params.emb[cand_ids], rng)
    cache["hist_ids"] = hist_ids
    cache["cand_ids"] = cand_ids
    return scores, cache


def forward_embedded(params, H, C, rng=None):
    """Forward pass from already-gathered history/candidate embeddings."""
    cfg = params.config
    res_h = res_c = None
    parts = []
    if params.history_block:
        res_h = attend(H, C, params.W_Q, params.W_K, params.W_V, cfg,
                       rng=cfg.seed if rng is None else rng)
        parts.append(res_h.out)
    if params.set_block:
        res_c = attn_softmax(C @ params.S_Q, C @ params.S_K, C @ params.S_V)
        parts.append(res_c.out)
    if params.normalize:
        # one unit-norm residual branch per enabled block, summed
        branches = [C + p for p in parts] or [C]
        units = []
        norms = []
        for b in branches:
            n = np.linalg.norm(b, axis=-1, keepdims=True)
            units.append(b / n)
            norms.append(n)
        z = sum(units)
        norm = (units, norms)
    else:
        z = C + sum(parts) if parts else C.copy()
        norm = None
    scores = z @ params.w
    return scores, {"C": C, "z": z, "norm": norm, "res_h": res_h, "res_c": res_c}


def backward_batch(params, cache, d_scores):
    """Parameter gradients for upstream ``d_scores`` (B, m)."""
    z = cache["z"]
    C = cache["C"]
    grads = {"w": (d_scores[..., None] * z).reshape(-1, z.shape[-1]).sum(axis=0)}
    dz = d_scores[..., None] * params.w
    d_branch = [dz] * (int(cache["res_h"] is not None) + int(cache["res_c"] is not None))
    if params.normalize:
        d_branch = [(dz - u * np.sum(dz * u, axis=-1, keepdims=True)) / n
                    for u, n in zip(*cache["norm"])]
        dC = sum(d_branch)
    else:
        dC = dz.copy()
    dH = None
    if cache["res_h"] is not None:
        g = attention_backward(cache["res_h"].cache, d_branch[0])
        dC += g["C"]
        dH = g["H"]
        for n in ("W_Q", "W_K", "W_V"):
            grads[n] = g[n]
    else:
        for n in ("W_Q", "W_K", "W_V"):
            grads[n] = np.zeros_like(getattr(params, n))
    if cache["res_c"] is not None:
        dQ, dK, dV = qkv_backward(cache["res_c"].cache, d_branch[-1])
        Ct = mT(C)
        grads["S_Q"] = np.sum(Ct @ dQ, axis=0) if C.ndim == 3 else Ct @ dQ
        grads["S_K"] = np.sum(Ct @ dK, axis=0) if C.ndim == 3 else Ct @ dK
        grads["S_V"] = np.sum(Ct @ dV, axis=0) if C.ndim == 3 else Ct @ dV
        dC += dQ @ params.S_Q.T + dK @ params.S_K.T + dV @ params.S_V.T
    else:
        for n in ("S_Q", "S_K", "S_V"):
            grads[n] = np.zeros_like(getattr(params, n))
    grads["C"] = dC
    grads["H"] = dH
    if params.train_embeddings and "cand_ids" in cache:
        d_emb = np.zeros_like(params.emb)
        np.add.at(d_emb, cache["cand_ids"].reshape(-1), dC.reshape(-1, params.dim))
        if dH is not None:
            np.add.at(d_emb, cache["hist_ids"].reshape(-1), dH.reshape(-1, params.dim))
        grads["emb"] = d_emb
    return grads


def forward_scores(params, inst, rng=None):
    """Scores for one :class:`~solar.datagen.RankingInstance` plus the
    representation cache (``cache["z"]`` holds the m x d representations)."""
    scores, cache = forward_batch(params, inst.history[None], inst.candidates[None], rng)
    return scores[0], cache


# -- losses --------------------------------------------------------------------

def listwise_loss(scores, positives):
    """Mean negative log-softmax of the positive items and its gradient
    ``softmax(s) - 1[t in P] / |P|``.  Raises on an empty positive set."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=np.int64).reshape(-1)
    if pos.size == 0:
        raise ValueError("listwise loss is undefined without positives")
    if pos.min() < 0 or pos.max() >= s.size:
        raise IndexError("positive index out of range")
    k = pos.size
    loss = logsumexp(s) - s[pos].sum() / k
    grad = softmax(s)
    np.add.at(grad, pos, -1.0 / k)
    return float(loss), grad


def batch_loss(scores, labels, kind):
    """Mean loss over the batch and its gradient w.r.t. ``scores``.

    Returns ``(loss, grad, n_used)``.  Listwise and pairwise losses skip
    requests without positives (or negatives, for pairwise).
    """
    y = labels.astype(np.float64)
    B = scores.shape[0]
    if kind == "listwise":
        k = y.sum(axis=1)
        used = k > 0
        if not used.any():
            return 0.0, np.zeros_like(scores), 0
        lse = logsumexp(scores, axis=1)
        per = lse - np.sum(scores * y, axis=1) / np.where(used, k, 1.0)
        grad = softmax(scores, axis=1) - y / np.where(used, k, 1.0)[:, None]
        grad[~used] = 0.0
        n = int(used.sum())
        return float(per[used].sum() / n), grad / n, n
    if kind == "pointwise-bce":
        p = expit(scores)
        per = np.logaddexp(0.0, scores) - y * scores
        return float(per.mean()), (p - y) / scores.size, B
    # pairwise logistic over (positive, negative) pairs within each request
    diff = scores[:, :, None] - scores[:, None, :]
    mask = (y[:, :, None] == 1) & (y[:, None, :] == 0)
    n_pairs = mask.sum(axis=(1, 2))
    used = n_pairs > 0
    if not used.any():
        return 0.0, np.zeros_like(scores), 0
    wts = np.where(mask, 1.0 / np.where(used, n_pairs, 1)[:, None, None], 0.0)
    per = np.sum(wts * np.logaddexp(0.0, -diff), axis=(1, 2))
    coef = -wts * expit(-diff)
    grad = coef.sum(axis=2) - coef.sum(axis=1)
    n = int(used.sum())
    return float(per[used].sum() / n), grad / n, n


# -- training ------------------------------------------------------------------

def _batches(instances, order, batch_size):
    # group by (history length, set size) so requests stack
    buckets = {}
    for i in order:
        inst = instances[i]
        buckets.setdefault((inst.history.size, inst.candidates.size), []).append(i)
    for idx in buckets.values():
        for start in range(0, len(idx), batch_size):
            chunk = [instances[i] for i in idx[start:start + batch_size]]
            yield (np.stack([c.history for c in chunk]), np.stack([c.candidates for c in chunk]),
                   np.stack([c.labels for c in chunk]))


def predict_scores(params, instances, batch_size=256):
    """Scores for every instance, in input order.  Uses the configured seed
    for the sketch, so predictions are deterministic."""
    out = [None] * len(instances)
    buckets = {}
    for i, inst in enumerate(instances):
        buckets.setdefault((inst.history.size, inst.candidates.size), []).append(i)
    for idx in buckets.values():
        for start in range(0, len(idx), batch_size):
            chunk = idx[start:start + batch_size]
            s, _ = forward_batch(params, np.stack([instances[i].history for i in chunk]),
                                 np.stack([instances[i].candidates for i in chunk]))
            for j, i in enumerate(chunk):
                out[i] = s[j]
    return out


def evaluate(params, instances):
    scores = predict_scores(params, instances)
    labels = [inst.labels for inst in instances]
    by_user = {}
    for inst, s in zip(instances, scores):
        by_user.setdefault(inst.user_id, ([], []))
        by_user[inst.user_id][0].append(s)
        by_user[inst.user_id][1].append(inst.labels)
    return {
        "auc": auc(np.concatenate(scores), np.concatenate(labels)),
        "uauc": grouped_auc([np.concatenate(v[0]) for v in by_user.values()],
                            [np.concatenate(v[1]) for v in by_user.values()]),
        "risk": mean_risk(scores, labels),
    }


def train(params, instances, cfg=None, eval_instances=None):
    """SGD with momentum over seeded shuffles.

    Returns ``(params, history)`` where ``history`` holds one dict per epoch
    (epoch, loss, auc, uauc, risk; metrics on ``eval_instances`` or the
    training set).  A non-finite loss raises :class:`TrainingDiverged`
    carrying the parameters from the start of that epoch.
    """
    cfg = cfg or TrainConfig()
    if not instances:
        raise ValueError("empty training set")
    params = params.copy()
    rng = make_rng(cfg.seed)
    sketch_rng = make_rng(cfg.seed + 1)
    velocity = {n: np.zeros_like(a) for n, a in params.arrays().items()}
    history = []
    eval_set = instances if eval_instances is None else eval_instances
    skipped = 0
    for epoch in range(1, cfg.epochs + 1):
        checkpoint = params.copy()
        order = rng.permutation(len(instances))
        total = used = 0
        for hist, cands, labels in _batches(instances, order, cfg.batch_size):
            scores, cache = forward_batch(params, hist, cands, rng=sketch_rng)
            loss, d_scores, n = batch_loss(scores, labels, cfg.loss)
            skipped += len(labels) - n
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, checkpoint, history)
            total += loss * n
            used += n
            if n == 0 or cfg.lr == 0:
                continue
            grads = backward_batch(params, cache, d_scores)
            for name, arr in params.arrays().items():
                v = velocity[name]
                v *= cfg.momentum
                v += grads[name]
                arr -= cfg.lr * v
        row = {"epoch": epoch, "loss": total / max(used, 1), **evaluate(params, eval_set)}
        if not np.isfinite(row["loss"]):
            raise TrainingDiverged(epoch, checkpoint, history)
        history.append(row)
        log.info("epoch %d loss %.5f auc %.4f risk %.4f", epoch, row["loss"], row["auc"], row["risk"])
    if skipped:
        log.info("skipped %d request-steps without usable labels", skipped)
    return params, history


class SolarRanker(BaseEstimator):
    """Estimator wrapper around :func:`train` / :func:`predict_scores`.

    ``fit`` takes a list of :class:`~solar.datagen.RankingInstance`;
    ``predict`` returns one score array per instance and ``score`` the pooled
    AUC.  ``vocab_size=None`` infers it from the largest id seen.
    """

    def __init__(self, dim=16, variant="svd", rank=4, n_iter=4, apply_softmax=True,
                 blocks="both", loss="listwise", lr=0.05, momentum=0.9, epochs=5,
                 batch_size=64, vocab_size=None, embeddings=None, train_embeddings=True,
                 normalize=False, random_state=0):
        self.dim = dim
        self.variant = variant
        self.rank = rank
        self.n_iter = n_iter
        self.apply_softmax = apply_softmax
        self.blocks = blocks
        self.loss = loss
        self.lr = lr
        self.momentum = momentum
        self.epochs = epochs
        self.batch_size = batch_size
        self.vocab_size = vocab_size
        self.embeddings = embeddings
        self.train_embeddings = train_embeddings
        self.normalize = normalize
        self.random_state = random_state

    def _vocab(self, X):
        if self.vocab_size is not None:
            return self.vocab_size
        if self.embeddings is not None:
            return len(self.embeddings)
        return int(max(max(i.history.max(), i.candidates.max()) for i in X)) + 1

    def fit(self, X, y=None, eval_set=None):
        if self.blocks not in BLOCKS:
            raise ValueError(f"blocks must be one of {tuple(BLOCKS)}")
        cfg = AttnConfig(self.variant, self.rank, self.n_iter, self.apply_softmax, seed=self.random_state)
        params = init_params(self._vocab(X), self.dim, cfg, self.blocks, self.random_state,
                             self.embeddings, self.train_embeddings, self.normalize)
        tcfg = TrainConfig(self.lr, self.momentum, self.epochs, self.batch_size, self.random_state, self.loss)
        self.params_, self.history_ = train(params, list(X), tcfg, eval_set)
        return self

    def predict(self, X):
        return predict_scores(self.params_, list(X))

    def score(self, X, y=None):
        return evaluate(self.params_, list(X))["auc"]
