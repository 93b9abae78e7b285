"""Numerical checks of the ranking-theory results: the point-wise Bayes
limit, the irreducible risk under contextual flips, the Lipschitz constant
of the listwise loss, the Rademacher mismatch factor and representation
de-correlation.

Every check returns :class:`VerificationReport` rows so the CLI can write
them out uniformly.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from .linalg import make_rng
from .model import forward_scores, listwise_loss

SQRT2 = float(np.sqrt(2.0))


@dataclass
class VerificationReport:
    """One check outcome.

    ``kind`` says how ``passed`` was decided: ``"abs"`` means
    ``|measured - expected| <= tolerance``, ``"rel"`` the same relative to
    ``|expected|``, ``"le"`` means ``measured <= expected + tolerance`` and
    ``"ge"`` means ``measured >= expected - tolerance``.
    """

    check: str
    measured: float
    expected: float
    tolerance: float
    kind: str = "abs"
    skipped: bool = False
    detail: dict = field(default_factory=dict)

    @property
    def passed(self):
        if self.skipped:
            return True
        m, e, t = self.measured, self.expected, self.tolerance
        if not np.isfinite(m):
            return False
        if self.kind == "abs":
            return abs(m - e) <= t
        if self.kind == "rel":
            return abs(m - e) <= t * abs(e)
        if self.kind == "le":
            return m <= e + t
        if self.kind == "ge":
            return m >= e - t
        raise ValueError(f"unknown check kind {self.kind!r}")

    def row(self):
        return {
            "check": self.check,
            "measured": format(self.measured, ".10g"),
            "expected": format(self.expected, ".10g"),
            "tolerance": format(self.tolerance, ".3g"),
            "pass": "skip" if self.skipped else str(self.passed).lower(),
        }


@dataclass(frozen=True)
class TheoryConfig:
    W: float = 1.0  # head-norm bound
    B: float = 1.0  # feature-norm bound
    m: int = 10
    N: int = 2000
    rho: float = 0.0
    mc_samples: int = 2000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.m < 1 or self.N < 1 or self.mc_samples < 1:
            raise ValueError("m, N and mc_samples must be positive")
        if self.W <= 0 or self.B <= 0:
            raise ValueError("W and B must be positive")

    @property
    def mismatch_factor(self):
        return float(np.sqrt(1.0 + (self.m - 1) * self.rho))


# -- Bayes limit -------------------------------------------------------------------

def random_preference_matrix(n, rng=None, spread=1.5):
    """Consistent preferences ``p_ij = sigmoid(f_i - f_j)`` from random
    latent scores; ``p_ji = 1 - p_ij`` and the diagonal is 0.5."""
    rng = make_rng(rng)
    f = spread * rng.standard_normal(n)
    return expit(f[:, None] - f[None, :])


def _check_preferences(p):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError("preference matrix must be square")
    off = ~np.eye(len(p), dtype=bool)
    if np.any((p[off] <= 0) | (p[off] >= 1)):
        raise ValueError("off-diagonal preferences must lie in (0, 1)")
    if not np.allclose(p + p.T, 1.0, atol=1e-12, rtol=0) and len(p) > 1:
        raise ValueError("preferences must satisfy p_ji = 1 - p_ij")
    return p


def fit_pointwise_pairwise_bce(p, lr=0.5, steps=20000, gtol=1e-12):
    """Minimize the population pairwise BCE over point-wise scores ``f``.

    Objective: ``sum_{i<j} p_ij log(1+e^-D) + (1-p_ij) log(1+e^D)`` with
    ``D = f_i - f_j``.  Returns ``(f, steps_used, grad_norm)``.
    """
    p = _check_preferences(p)
    n = len(p)
    f = np.zeros(n)
    iu = np.triu_indices(n, 1)
    g_norm = np.inf
    for step in range(1, steps + 1):
        D = f[:, None] - f[None, :]
        G = np.zeros((n, n))
        G[iu] = expit(D[iu]) - p[iu]  # d obj / d D_ij
        grad = G.sum(axis=1) - G.sum(axis=0)
        g_norm = float(np.linalg.norm(grad))
        if g_norm < gtol:
            break
        f -= lr * grad / max(n - 1, 1)
    f -= f.mean()
    return f, step, g_norm


def bayes_limit_check(p, lr=0.5, steps=20000, tol=1e-2):
    """``max_ij |sigmoid(f_i - f_j) - p_ij|`` at the converged point-wise
    minimizer of the pairwise BCE."""
    p = _check_preferences(p)
    f, used, g_norm = fit_pointwise_pairwise_bce(p, lr, steps)
    resid = np.abs(expit(f[:, None] - f[None, :]) - p)
    np.fill_diagonal(resid, 0.0)
    rep = VerificationReport("bayes_limit", float(resid.max()), 0.0, tol, "abs",
                             detail={"scores": f, "steps": used, "grad_norm": g_norm})
    if g_norm > 1e-6:
        rep.detail["converged"] = False
        rep.measured = max(rep.measured, tol + g_norm)
    return rep


def closed_form_margin(p_ij):
    """Optimal score gap ``log(p / (1 - p))``."""
    return float(logit(p_ij))


# -- irreducible risk -------------------------------------------------------------

@dataclass
class TwoContextSpec:
    """Two equally (or otherwise) likely candidate sets over shared items.

    ``contexts`` holds ``(prob, item_ids, eta)`` triples; ``eta[k]`` is the
    relevance of ``item_ids[k]`` in that context.
    """

    contexts: list

    def __post_init__(self):
        total = sum(c[0] for c in self.contexts)
        if not np.isclose(total, 1.0):
            raise ValueError(f"context probabilities sum to {total}, not 1")
        for _, ids, eta in self.contexts:
            if len(ids) != len(eta):
                raise ValueError("each context needs one eta per item")

    @property
    def items(self):
        return sorted(set().union(*(set(int(i) for i in c[1]) for c in self.contexts)))

    def labels(self, threshold=0.5):
        return [(np.asarray(eta) >= threshold).astype(np.int64) for _, _, eta in self.contexts]

    def flipped_pairs(self):
        """Item pairs whose eta order reverses between some two contexts."""
        out = set()
        for (_, ids1, e1), (_, ids2, e2) in itertools.combinations(self.contexts, 2):
            pos1 = {int(i): k for k, i in enumerate(ids1)}
            pos2 = {int(i): k for k, i in enumerate(ids2)}
            common = sorted(set(pos1) & set(pos2))
            for a, b in itertools.combinations(common, 2):
                d1 = e1[pos1[a]] - e1[pos1[b]]
                d2 = e2[pos2[a]] - e2[pos2[b]]
                if d1 * d2 < 0:
                    out.add((a, b))
        return sorted(out)


    def label_flipped_pairs(self, threshold=0.5):
        """Flipped pairs that are (positive, negative) in one context and
        (negative, positive) in another after thresholding."""
        labels = self.labels(threshold)
        out = []
        for a, b in self.flipped_pairs():
            signs = set()
            for (_, ids, _), y in zip(self.contexts, labels):
                ids = [int(i) for i in ids]
                if a in ids and b in ids and y[ids.index(a)] != y[ids.index(b)]:
                    signs.add(int(y[ids.index(a)]))
            if signs == {0, 1}:
                out.append((a, b))
        return out


def textbook_flip_spec():
    """Items 0 and 1 swap order when item 2 joins the set."""
    return TwoContextSpec([
        (0.5, [0, 1], np.array([0.8, 0.2])),
        (0.5, [0, 1, 2], np.array([0.3, 0.7, 0.1])),
    ])


def spec_from_generator(catalog, flip, seed=0, m=4, shared=2, n_hist=50, near_duplicate=False):
    """Two contexts of ``m`` candidates sharing ``shared`` items for one
    sampled user, with ``eta*`` from the generator's relevance model.

    ``near_duplicate`` puts the catalog's closest neighbor of the first
    shared item into the second context only, which is what makes the
    similarity penalty reorder items.
    """
    from .datagen import _sample_user, relevance

    if 2 * m - shared > 8:
        raise ValueError("brute force is limited to 8 distinct items")
    rng = make_rng(seed)
    _, u = _sample_user(catalog, n_hist, flip, rng)
    emb = catalog.embeddings
    ids = rng.choice(catalog.vocab_size, size=2 * m - shared, replace=False)
    if near_duplicate:
        En = emb / np.linalg.norm(emb, axis=1, keepdims=True)
        cos = En @ En[ids[0]]
        cos[ids] = -np.inf
        ids[m] = int(np.argmax(cos))
    ctx1, ctx2 = ids[:m], np.concatenate([ids[:shared], ids[m:]])
    return TwoContextSpec([
        (0.5, list(ctx1), relevance(u, emb[ctx1], flip)),
        (0.5, list(ctx2), relevance(u, emb[ctx2], flip)),
    ])


def _context_risk(score_rows, labels):
    # Def.-2 risk of each row of scores (ties count as errors)
    pos = score_rows[:, labels == 1]
    neg = score_rows[:, labels == 0]
    if pos.shape[1] == 0 or neg.shape[1] == 0:
        return np.zeros(len(score_rows))
    bad = neg[:, None, :] >= pos[:, :, None]
    return bad.mean(axis=(1, 2))


def pointwise_risk_floor(spec, threshold=0.5):
    """Minimum expected risk over every strict total order of the items,
    i.e. over every point-wise scorer.  Returns ``(floor, best_order)``."""
    items = spec.items
    if len(items) > 8:
        raise ValueError("brute force is limited to 8 distinct items")
    col = {it: k for k, it in enumerate(items)}
    perms = np.array(list(itertools.permutations(range(len(items)))), dtype=np.float64)
    risk = np.zeros(len(perms))
    for (prob, ids, _), y in zip(spec.contexts, spec.labels(threshold)):
        cols = [col[int(i)] for i in ids]
        risk += prob * _context_risk(perms[:, cols], y)
    k = int(np.argmin(risk))
    return float(risk[k]), perms[k]


def setwise_oracle_risk(spec, threshold=0.5):
    """Expected risk of scoring every context by its own ``eta*``."""
    return float(sum(prob * _context_risk(np.asarray(eta)[None], y)[0]
                     for (prob, _, eta), y in zip(spec.contexts, spec.labels(threshold))))


def analytic_floor(spec, threshold=0.5):
    """Lower bound from a single label-flipped pair: some context must
    misorder it, costing its probability times the pair weight
    ``1 / (|P||N|)`` of that context."""
    labels = spec.labels(threshold)
    best = 0.0
    for a, b in spec.label_flipped_pairs(threshold):
        costs = []
        for (prob, ids, _), y in zip(spec.contexts, labels):
            ids = [int(i) for i in ids]
            if a in ids and b in ids and y[ids.index(a)] != y[ids.index(b)]:
                costs.append(prob / (y.sum() * (len(y) - y.sum())))
        best = max(best, min(costs))
    return best


def irreducible_risk_check(spec, threshold=0.5):
    """Brute-force point-wise floor vs. the set-wise oracle.

    Returns two reports.  The floor must be > 0 and at least the analytic
    bound when a flip survives thresholding, and exactly 0 when the spec
    has no flip at all.  An eta-level flip that does not cross the label
    threshold makes the noiseless check vacuous (reported as skipped).
    The set-wise oracle risk must be 0.
    """
    floor, order = pointwise_risk_floor(spec, threshold)
    oracle = setwise_oracle_risk(spec, threshold)
    flips = spec.flipped_pairs()
    label_flips = spec.label_flipped_pairs(threshold)
    detail = {"order": order, "flipped_pairs": flips, "label_flipped_pairs": label_flips}
    if label_flips:
        bound = analytic_floor(spec, threshold)
        rep = VerificationReport("flip_pointwise_floor", floor, bound, 0.0, "ge", detail=detail)
        if floor <= 0:
            rep.measured = float("nan")
    elif flips:
        rep = VerificationReport("flip_pointwise_floor", floor, 0.0, 0.0, "ge", skipped=True, detail=detail)
    else:
        rep = VerificationReport("flip_pointwise_floor", floor, 0.0, 0.0, "abs", detail=detail)
    return [rep, VerificationReport("flip_setwise_oracle", oracle, 0.0, 0.0, "abs")]


# -- Lipschitz ---------------------------------------------------------------------

def extreme_gradient_norm(gap=50.0):
    """``k = 1`` with the positive at ``-gap`` and one negative at ``+gap``."""
    _, g = listwise_loss(np.array([-gap, gap]), [0])
    return float(np.linalg.norm(g))


def lipschitz_check(n_samples=100_000, seed=0, m_range=(2, 64)):
    """Largest listwise gradient norm over random draws, plus the extreme
    two-item case.  Scores are drawn at random scales (up to 1e3) so the
    near-degenerate regime is probed too."""
    rng = make_rng(seed)
    worst = 0.0
    lo, hi = m_range
    for _ in range(n_samples):
        m = int(rng.integers(lo, hi + 1))
        k = int(rng.integers(1, m))
        s = rng.standard_normal(m) * 10.0 ** rng.uniform(-2, 3)
        pos = rng.choice(m, size=k, replace=False)
        _, g = listwise_loss(s, pos)
        worst = max(worst, float(np.linalg.norm(g)))
    extreme = extreme_gradient_norm()
    return [
        VerificationReport("lipschitz_max_norm", worst, SQRT2, 1e-9, "le", detail={"draws": n_samples}),
        VerificationReport("lipschitz_extreme_case", extreme, 0.99 * SQRT2, 0.0, "ge"),
    ]


# -- Rademacher mismatch ----------------------------------------------------------------

def correlated_features(N, m, rho, B=1.0, dim=None, rng=None):
    """``(N, m, dim)`` features with ``||z|| = B`` and within-request inner
    products exactly ``rho B^2``: ``z_i = B (sqrt(rho) c + sqrt(1-rho) e_i)``
    with ``c, e_1..e_m`` orthonormal per request."""
    rng = make_rng(rng)
    dim = dim or m + 1
    if dim < m + 1:
        raise ValueError("dim must be at least m + 1")
    G = rng.standard_normal((N, dim, m + 1))
    Q, _ = np.linalg.qr(G)
    Q = np.swapaxes(Q, 1, 2)  # rows are orthonormal vectors
    c, e = Q[:, :1, :], Q[:, 1:, :]
    return B * (np.sqrt(rho) * c + np.sqrt(1.0 - rho) * e)


def rademacher_estimates(Z, W=1.0, n_draws=2000, rng=None, chunk=250):
    """Monte-Carlo empirical Rademacher complexity of ``{z -> w.z : ||w|| <= W}``
    on ``Z`` (N, m, dim), using ``sup_w w.v = W ||v||``.

    Returns ``(iid, dep)``: one sign per item vs. one sign per request.
    """
    rng = make_rng(rng)
    N, m, dim = Z.shape
    flat = Z.reshape(N * m, dim)
    S = Z.sum(axis=1)
    iid = dep = 0.0
    done = 0
    while done < n_draws:
        k = min(chunk, n_draws - done)
        sig = rng.choice([-1.0, 1.0], size=(k, N * m))
        iid += np.linalg.norm(sig @ flat, axis=1).sum()
        sig_r = rng.choice([-1.0, 1.0], size=(k, N))
        dep += np.linalg.norm(sig_r @ S, axis=1).sum()
        done += k
    scale = W / (m * N)
    return scale * iid / n_draws, scale * dep / n_draws


def rademacher_mismatch(cfg):
    """Dep/iid ratio vs. ``sqrt(1 + (m-1) rho)`` and both estimates vs.
    their bounds ``W B / sqrt(mN)`` (times the factor for the dependent
    case)."""
    rng = make_rng(cfg.seed)
    Z = correlated_features(cfg.N, cfg.m, cfg.rho, cfg.B, dim=cfg.m + 1, rng=rng)
    iid, dep = rademacher_estimates(Z, cfg.W, cfg.mc_samples, rng)
    base = cfg.W * cfg.B / np.sqrt(cfg.m * cfg.N)
    tag = f"m={cfg.m},rho={cfg.rho:g}"
    return [
        VerificationReport(f"rademacher_ratio[{tag}]", dep / iid, cfg.mismatch_factor, 0.10, "rel"),
        VerificationReport(f"rademacher_iid_bound[{tag}]", iid, base, 0.0, "le"),
        VerificationReport(f"rademacher_dep_bound[{tag}]", dep, base * cfg.mismatch_factor, 0.0, "le"),
    ]


MISMATCH_GRID = ((10, 0.0), (10, 0.5), (10, 1.0), (50, 0.2))


# -- de-correlation --------------------------------------------------------------------

def mean_pairwise_cosine(Z):
    """Mean off-diagonal cosine between the rows of ``Z``."""
    Zn = Z / np.maximum(np.linalg.norm(Z, axis=-1, keepdims=True), 1e-300)
    G = Zn @ Zn.T
    m = len(Z)
    return float((G.sum() - np.trace(G)) / (m * (m - 1)))


def representation_correlation(params, instances):
    """Mean within-request cosine of the model's representations ``z``."""
    vals = [mean_pairwise_cosine(forward_scores(params, inst)[1]["z"][0]) for inst in instances]
    return float(np.mean(vals))


def input_correlation(embeddings, instances):
    return float(np.mean([mean_pairwise_cosine(embeddings[inst.candidates]) for inst in instances]))


def correlation_check(point_params, set_params, instances, min_gap=0.1):
    """Set-wise representations must be less correlated than point-wise ones."""
    rho_point = representation_correlation(point_params, instances)
    rho_set = representation_correlation(set_params, instances)
    return [
        VerificationReport("correlation_gap", rho_point - rho_set, min_gap, 0.0, "ge",
                           detail={"rho_point": rho_point, "rho_set": rho_set}),
    ]
