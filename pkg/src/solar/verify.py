"""Verification suites behind ``solar verify``.

Each suite maps a seed to a list of :class:`~solar.theory.VerificationReport`
rows; the gradient suite also returns one row per (instance, block).
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .datagen import FlipSpec, gen_catalog
from .gradcheck import gradient_suite
from .linalg import make_rng
from .theory import (
    MISMATCH_GRID,
    TheoryConfig,
    VerificationReport,
    bayes_limit_check,
    irreducible_risk_check,
    lipschitz_check,
    rademacher_mismatch,
    random_preference_matrix,
    spec_from_generator,
    textbook_flip_spec,
)

SUITES = ("bayes", "flip", "lipschitz", "rademacher", "correlation", "gradient")

# default tolerances, printed by ``--version``
TOLERANCES = {
    "bayes_limit": 1e-2,
    "lipschitz": 1e-9,
    "rademacher_ratio_rel": 0.10,
    "correlation_gap": 0.1,
    "gradient_rel_err": 1e-4,
    "gradient_span_residual": 1e-10,
}

GRAD_COLUMNS = ("instance", "block", "max_rel_err", "clamped_pairs")

# generator settings whose candidate sets produce label-level flips
_FLIP = FlipSpec(a=4.0, b=8.0, intercept=4.0)


def _tag(reports, tag):
    return [replace(r, check=f"{r.check}[{tag}]") for r in reports]


def suite_bayes(seed=0, n_matrices=5, n_items=4):
    rng = make_rng([seed, 1])
    return [replace(bayes_limit_check(random_preference_matrix(n_items, rng), tol=TOLERANCES["bayes_limit"]),
                    check=f"bayes_limit[{k}]") for k in range(n_matrices)]


def first_label_flip_spec(catalog, flip, seed=0, max_tries=500):
    """First generator spec at or after ``seed`` whose flip survives label
    thresholding; returns ``(spec, seed_used)``."""
    for s in range(seed, seed + max_tries):
        spec = spec_from_generator(catalog, flip, seed=s)
        if spec.label_flipped_pairs():
            return spec, s
    raise RuntimeError(f"no label-level flip in {max_tries} generator draws from seed {seed}")


def suite_flip(seed=0):
    catalog = gen_catalog(1000, 32, 8, seed=1)
    spec, _ = first_label_flip_spec(catalog, _FLIP, seed)
    # b = 0 removes the set-dependent term, so no pair can flip
    flat = spec_from_generator(catalog, replace(_FLIP, b=0.0), seed=seed)
    return (_tag(irreducible_risk_check(textbook_flip_spec()), "textbook")
            + _tag(irreducible_risk_check(spec), "generator")
            + _tag(irreducible_risk_check(flat), "flip_free"))


def suite_lipschitz(seed=0, n_samples=100_000):
    return lipschitz_check(n_samples=n_samples, seed=seed)


def suite_rademacher(seed=0, N=2000):
    out = []
    for m, rho in MISMATCH_GRID:
        cfg = TheoryConfig(m=m, rho=rho, N=N, seed=seed)
        out += _tag(rademacher_mismatch(cfg), f"m={m},rho={rho:g}")
    return out


def suite_correlation(seed=0):
    from .experiments import CorrelationSetup, run_correlation

    return run_correlation(CorrelationSetup(seed=seed))["reports"]


def suite_gradient(seed=0, n_instances=30):
    """Summary reports (worst error per block, worst span residual) plus
    per-instance rows for the GradReport CSV."""
    rows = []
    worst = {}
    worst_span = 0.0
    for ident, reports, span in gradient_suite(n_instances, seed):
        for rep in reports:
            rows.append((ident, rep.block, rep.max_rel_err, rep.clamped_pairs))
            worst[rep.block] = max(worst.get(rep.block, 0.0), rep.max_rel_err)
        worst_span = max(worst_span, span)
    tol = TOLERANCES["gradient_rel_err"]
    summary = [VerificationReport(f"gradient_{b}", e if np.isfinite(e) else np.nan, 0.0, tol, "le")
               for b, e in worst.items()]
    summary.append(VerificationReport("gradient_span_residual", worst_span, 0.0,
                                      TOLERANCES["gradient_span_residual"], "le"))
    return summary, rows


def run_suites(names, seed=0):
    """``(reports, gradient_rows)``; ``gradient_rows`` is None unless the
    gradient suite ran."""
    reports, grad_rows = [], None
    for name in names:
        if name == "gradient":
            summary, grad_rows = suite_gradient(seed)
            reports += summary
        else:
            reports += globals()[f"suite_{name}"](seed)
    return reports, grad_rows
