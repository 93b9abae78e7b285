"""The twelve acceptance criteria at their stated sizes and tolerances.

Each test records one pass/fail line, printed in the terminal summary.
"""
import csv
import io
import math
import time

import numpy as np
import pytest

from solar.attention import AttnConfig, attend, attn_svd
from solar.autodiff import bias_term, chain_to_factors, svd_backward_full_oracle, svd_backward_truncated
from solar.bench import BenchSpec, fit_scaling, run_bench
from solar.cli import dispatch
from solar.experiments import AblationSetup, run_ablation
from solar.linalg import make_rng, svd_dense, write_matrix_csv
from solar.randsvd import SvdFactors, randomized_svd, recover_left_vectors
from solar.theory import (
    MISMATCH_GRID,
    TheoryConfig,
    TwoContextSpec,
    bayes_limit_check,
    irreducible_risk_check,
    lipschitz_check,
    rademacher_mismatch,
    random_preference_matrix,
    textbook_flip_spec,
)
from solar.verify import suite_gradient

from conftest import ACCEPTANCE, rel

pytestmark = pytest.mark.slow


def record(num, ok, text):
    ACCEPTANCE.append((num, bool(ok), text))
    assert ok, f"criterion {num}: {text}"


def test_c01_lossless_low_rank():
    t0 = time.perf_counter()
    worst = 0.0
    for draw in range(50):
        r = (2, 8, 16)[draw % 3]
        rng = make_rng([1, draw])
        true_rank = int(rng.integers(1, r + 1))
        H = rng.standard_normal((512, true_rank)) @ rng.standard_normal((true_rank, 64))
        C = rng.standard_normal((64, 64))
        W = [rng.standard_normal((64, 64)) / 8.0 for _ in range(3)]
        svd = attn_svd(H, C, *W, AttnConfig("svd", rank=r, apply_softmax=False, seed=draw))
        lin = attend(H, C, *W, AttnConfig("linear"))
        worst = max(worst, rel(svd.out, lin.out))
    elapsed = time.perf_counter() - t0
    record(1, worst <= 1e-6 and elapsed < 30,
           f"lossless: worst rel err {worst:.2e} (<= 1e-6) over 50 draws in {elapsed:.1f} s (< 30 s)")


def _subspace_error(V, V_ref):
    return float(np.linalg.norm(V @ V.T - V_ref @ V_ref.T, 2))


def test_c02_randomized_svd_fidelity():
    worst_s = 0.0
    for seed in range(20):
        rng = make_rng([2, seed])
        r = int(rng.integers(1, 9))
        H = rng.standard_normal((80, r)) @ rng.standard_normal((r, 24))
        s_ref = svd_dense(H).s[:r]
        worst_s = max(worst_s, float(np.max(np.abs(randomized_svd(H, r, rng=seed).s - s_ref) / s_ref)))
    monotone = 0
    for seed in range(20):
        rng = make_rng([3, seed])
        H = rng.standard_normal((120, 30)) * (0.8 ** np.arange(30))
        V_ref = svd_dense(H).V[:, :5]
        errs = [_subspace_error(randomized_svd(H, 5, n_iter=q, rng=seed).V, V_ref) for q in range(6)]
        monotone += all(b <= a + 1e-10 for a, b in zip(errs, errs[1:]))
    record(2, worst_s <= 1e-8 and monotone == 20,
           f"randsvd: worst sigma rel err {worst_s:.2e} (<= 1e-8); subspace error monotone on {monotone}/20 seeds")


def test_c03_backward_finite_differences():
    summary, _ = suite_gradient(seed=0, n_instances=30)
    blocks = {r.check: r.measured for r in summary}
    span = blocks.pop("gradient_span_residual")
    worst = max(blocks.values())
    record(3, all(r.passed for r in summary),
           f"backward: worst block rel err {worst:.2e} (<= 1e-4) over {len(blocks)} blocks x 30 instances; "
           f"span residual {span:.2e} (<= 1e-10)")


def test_c04_bias_bound():
    r = 3
    violations = 0
    for seed in range(200):
        rng = make_rng([4, seed])
        H = rng.standard_normal((12, 6))
        dec = svd_dense(H)
        f = SvdFactors(s=dec.s[:r], V=dec.V[:, :r], U=dec.U[:, :r])
        g = chain_to_factors(rng.standard_normal((r, 6)), f.V, f.s)
        E, bound = bias_term(H, f, g)
        violations += np.linalg.norm(E) > bound * (1 + 1e-12)
    worst = 0.0
    for seed in range(20):
        rng = make_rng([5, seed])
        U = np.linalg.qr(rng.standard_normal((12, 6)))[0]
        V = np.linalg.qr(rng.standard_normal((6, 6)))[0]
        s = np.array([5.0, 3.0, 2.0, 2e-6, 1e-6, 5e-7])  # sigma_4 / sigma_3 = 1e-6
        H = (U * s) @ V.T
        f = recover_left_vectors(H, randomized_svd(H, r, n_iter=6, rng=seed), eps_rel=1e-12)
        g = chain_to_factors(rng.standard_normal((r, 6)), f.V, f.s)
        E, _ = bias_term(H, f, g)
        diff = svd_backward_full_oracle(H, g, r) - svd_backward_truncated(f, g)
        worst = max(worst, rel(diff, E))
    record(4, violations == 0 and worst <= 0.01,
           f"bias: bound violated on {violations}/200 draws; oracle-minus-truncated vs E worst rel {worst:.2e} (<= 1e-2)")


@pytest.fixture(scope="module")
def bench_rows():
    t0 = time.perf_counter()
    rows = run_bench(BenchSpec(grid=(256, 512, 1024, 2048, 4096, 8192), d=64, r=8))
    return rows, time.perf_counter() - t0


def test_c05_complexity_scaling(bench_rows):
    rows, elapsed = bench_rows
    fits = fit_scaling(rows)
    last = {r.variant: r.median_ms for r in rows if r.n_l == 8192}
    ok = (1.8 <= fits["softmax"].slope <= 2.2
          and all(0.9 <= fits[v].slope <= 1.2 for v in ("linear", "svd"))
          and all(f.r2 >= 0.98 for f in fits.values())
          and last["svd"] < last["softmax"] and last["svd"] < last["linear"]
          and elapsed < 600)
    slopes = ", ".join(f"{v} {f.slope:.3f} (R2 {f.r2:.3f})" for v, f in fits.items())
    record(5, ok, f"scaling: slopes {slopes}; at 8192 svd {last['svd']:.2f} ms, linear {last['linear']:.2f} ms, "
                  f"softmax {last['softmax']:.1f} ms; {elapsed:.0f} s (< 600 s)")


def test_c06_bayes_limit():
    worst = max(bayes_limit_check(random_preference_matrix(4, make_rng([6, k]))).measured for k in range(20))
    record(6, worst <= 1e-2, f"bayes: worst |sigmoid(delta) - p| {worst:.2e} (<= 1e-2) over 20 matrices")


def test_c07_irreducible_risk():
    flip = irreducible_risk_check(textbook_flip_spec())
    flat = irreducible_risk_check(TwoContextSpec([
        (0.5, [0, 1, 2], np.array([0.9, 0.6, 0.1])),
        (0.5, [0, 1, 3], np.array([0.8, 0.7, 0.2])),
    ]))
    ok = flip[0].measured > 0 and flip[1].measured == 0 and flat[0].measured == 0 and not flat[0].skipped
    record(7, ok, f"flip: point-wise floor {flip[0].measured:.3f} (> 0), set-wise oracle {flip[1].measured:g} (= 0), "
                  f"flip-free floor {flat[0].measured:g} (= 0)")


def test_c08_lipschitz():
    worst, extreme = lipschitz_check(n_samples=100_000, seed=0)
    record(8, worst.passed and extreme.passed,
           f"lipschitz: max norm {worst.measured:.12f} (<= sqrt2 + 1e-9 = {math.sqrt(2) + 1e-9:.12f}); "
           f"constructed case {extreme.measured:.6f} (>= {0.99 * math.sqrt(2):.6f})")


def test_c09_rademacher_mismatch():
    parts, ok = [], True
    for m, rho in MISMATCH_GRID:
        ratio, iid, dep = rademacher_mismatch(TheoryConfig(m=m, rho=rho, N=2000, seed=0))
        ok &= ratio.passed and iid.passed and dep.passed
        parts.append(f"(m={m},rho={rho:g}) {ratio.measured:.3f}/{ratio.expected:.3f}")
    record(9, ok, "rademacher: ratio/factor " + ", ".join(parts) + "; MC <= bounds")


@pytest.fixture(scope="module")
def verify_runs(tmp_path_factory):
    out = []
    for k in range(2):
        path = tmp_path_factory.mktemp(f"verify{k}") / "report.csv"
        code = dispatch(["verify", "--suite", "all", "--seed", "0", "--report", str(path)])
        out.append((code, path.read_bytes()))
    return out


def test_c10_correlation_ordering(verify_runs):
    rows = list(csv.DictReader(io.StringIO(verify_runs[0][1].decode())))
    gap = next(r for r in rows if r["check"] == "correlation_gap")
    record(10, gap["pass"] == "true",
           f"correlation: rho_point - rho_set = {float(gap['measured']):.3f} (>= 0.1) at shared strength 10")


@pytest.fixture(scope="module")
def ablation():
    return run_ablation(AblationSetup())


def test_c11_ablation(ablation):
    full = ablation["full"]
    ok = (all(full["uauc"] >= ablation[k]["uauc"] for k in ("history_only", "candidates_only"))
          and math.isfinite(ablation["svd_no_softmax"]["loss"])
          and abs(ablation["svd_no_softmax"]["uauc"] - full["uauc"]) <= 0.02)
    text = ", ".join(f"{k} {v['uauc']:.4f}" for k, v in ablation.items())
    record(11, ok, f"ablation (test uauc, 20k requests): {text}")


def test_c12_determinism(tmp_path, verify_runs, capsys):
    rng = make_rng(12)
    write_matrix_csv(tmp_path / "H.csv", rng.standard_normal((40, 4)) @ rng.standard_normal((4, 10)))
    outputs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        d.mkdir()
        codes = [
            dispatch(["svd", "--input", str(tmp_path / "H.csv"), "--rank", "4", "--seed", "3",
                      "--out", str(d / "svd.txt")]),
            dispatch(["datagen", "--users", "200", "--vocab", "100", "--dim", "8", "--true-rank", "3",
                      "--hist", "10", "--m", "8", "--seed", "5", "--out", str(d / "data.tsv")]),
            dispatch(["train", "--data", str(d / "data.tsv"), "--dim", "8", "--rank", "2", "--epochs", "2",
                      "--seed", "5", "--metrics", str(d / "metrics.csv")]),
            dispatch(["bench", "--n", "16,32,64,128", "--d", "8", "--rank", "2", "--reps", "3",
                      "--csv", str(d / "bench.csv")]),
        ]
        files = {p.name: p.read_bytes() for p in sorted(d.iterdir())}
        # bench: everything except the timing columns
        files["bench.csv"] = [ln.split(b",")[:6] for ln in files["bench.csv"].splitlines()]
        outputs.append((codes, files))
    capsys.readouterr()
    same = outputs[0] == outputs[1] and verify_runs[0] == verify_runs[1]
    # verify's exit code reflects its checks (criterion 10 etc.), not determinism
    codes_ok = outputs[0][0] == [0, 0, 0, 0] and verify_runs[0][0] in (0, 2)
    record(12, same and codes_ok,
           "determinism: svd, datagen, train, verify (all suites) and bench inputs byte-identical across reruns")
