"""Desk-scale training experiments: the block ablation and the
representation de-correlation study.

Both use frozen item embeddings taken from the generating catalog (the model
learns attention maps and the head, not the items) and unit-normalized
residual branches.  See the README for why those choices matter here.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttnConfig
from .datagen import FlipSpec, gen_catalog, gen_dataset
from .linalg import make_rng
from .model import TrainConfig, evaluate, init_params, train
from .theory import correlation_check, input_correlation, representation_correlation

# name -> (variant, apply_softmax, blocks)
ABLATION_ROWS = {
    "full": ("svd", True, "both"),
    "history_only": ("svd", True, "history"),
    "candidates_only": ("svd", True, "candidates"),
    "svd_no_softmax": ("svd", False, "both"),
}


def pretrained_embeddings(catalog, offset=1.0, seed=0):
    """Catalog embeddings plus one shared vector of norm ``offset``.

    The generator's embeddings have zero mean, so the history Gram matrix
    carries no fixed direction a linear head could read the user's taste
    along; the shared offset supplies one.
    """
    v = make_rng(seed).standard_normal(catalog.dim)
    return catalog.embeddings + offset * v / np.linalg.norm(v)


@dataclass(frozen=True)
class AblationSetup:
    n_requests: int = 20_000
    test_fraction: float = 0.2
    vocab: int = 1000
    dim: int = 32
    true_rank: int = 8
    flip: FlipSpec = field(default_factory=lambda: FlipSpec(a=4.0, b=8.0, intercept=4.0))
    rank: int = 8
    lr: float = 0.2
    epochs: int = 8
    batch_size: int = 64
    offset: float = 1.0
    seed: int = 0


def ablation_data(setup):
    catalog = gen_catalog(setup.vocab, setup.dim, setup.true_rank, seed=setup.seed)
    data = gen_dataset(catalog, setup.n_requests, flip=setup.flip, seed=setup.seed + 1)
    n_test = int(round(setup.test_fraction * len(data)))
    return catalog, data[:-n_test], data[-n_test:]


def run_ablation(setup=None, rows=None):
    """Train every row of :data:`ABLATION_ROWS` on one dataset.

    Returns ``{row: {"loss", "auc", "uauc", "risk", "history"}}`` with test
    metrics of the final epoch.
    """
    setup = setup or AblationSetup()
    rows = rows or list(ABLATION_ROWS)
    catalog, train_set, test_set = ablation_data(setup)
    emb = pretrained_embeddings(catalog, setup.offset, setup.seed)
    tcfg = TrainConfig(lr=setup.lr, epochs=setup.epochs, batch_size=setup.batch_size, seed=setup.seed)
    out = {}
    for name in rows:
        variant, softmax, blocks = ABLATION_ROWS[name]
        cfg = AttnConfig(variant, rank=setup.rank, apply_softmax=softmax, seed=setup.seed)
        params = init_params(setup.vocab, setup.dim, cfg, blocks, seed=setup.seed, embeddings=emb,
                             train_embeddings=False, normalize=True)
        params, hist = train(params, train_set, tcfg, eval_instances=test_set)
        out[name] = {**hist[-1], "history": hist}
    return out


@dataclass(frozen=True)
class CorrelationSetup:
    n_train: int = 4000
    n_eval: int = 200
    vocab: int = 1000
    dim: int = 32
    true_rank: int = 8
    shared_strength: float = 10.0
    a: float = 1.0
    b: float = 4.0
    rank: int = 8
    lr: float = 0.03
    epochs: int = 8
    seed: int = 0
    set_blocks: str = "candidates"

    @property
    def flip(self):
        # the shared component adds ~a*strength^2 to every logit; cancel it
        return FlipSpec(a=self.a, b=self.b, shared_component_strength=self.shared_strength,
                        intercept=-self.a * self.shared_strength**2)


def run_correlation(setup=None):
    """Train a point-wise (history-only) and a set-wise model
    (``setup.set_blocks``, candidate-set block by default) on a
    single-shared-component catalog and compare within-request
    representation cosines.

    Returns a dict with ``rho_input``, ``rho_point_init``, ``rho_point``,
    ``rho_set``, the final training losses and the verification reports.
    """
    setup = setup or CorrelationSetup()
    catalog = gen_catalog(setup.vocab, setup.dim, setup.true_rank, seed=setup.seed,
                          shared_strength=setup.shared_strength, n_clusters=1)
    data = gen_dataset(catalog, setup.n_train + setup.n_eval, flip=setup.flip, seed=setup.seed + 1)
    train_set, eval_set = data[:setup.n_train], data[setup.n_train:]
    tcfg = TrainConfig(lr=setup.lr, epochs=setup.epochs, seed=setup.seed)
    trained = {}
    init_rho = None
    for blocks in ("history", setup.set_blocks):
        cfg = AttnConfig("svd", rank=setup.rank, seed=setup.seed)
        params = init_params(setup.vocab, setup.dim, cfg, blocks, seed=setup.seed,
                             embeddings=catalog.embeddings, train_embeddings=False, normalize=True)
        if blocks == "history":
            init_rho = representation_correlation(params, eval_set)
        trained[blocks] = train(params, train_set, tcfg)
    (p_point, h_point), (p_set, h_set) = trained["history"], trained[setup.set_blocks]
    reports = correlation_check(p_point, p_set, eval_set)
    return {
        "rho_input": input_correlation(catalog.embeddings, eval_set),
        "rho_point_init": init_rho,
        "rho_point": reports[0].detail["rho_point"],
        "rho_set": reports[0].detail["rho_set"],
        "loss_point": h_point[-1]["loss"],
        "loss_set": h_set[-1]["loss"],
        "reports": reports,
    }
