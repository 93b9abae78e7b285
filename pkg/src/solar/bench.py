"""Single-thread forward-latency benchmark of the three attention variants.

Each timed call runs the whole module from raw inputs ``(H, C, W_Q, W_K,
W_V)``: projections, the attention itself and, for the svd variant, the
randomized factorization.  Two regimes:

* ``tied``: ``N_C = N_L = N``; softmax is quadratic in N, the others linear
* ``fixed-m``: ``N_C = m`` fixed; every variant is linear in ``N_L``
"""
from __future__ import annotations

import csv
import ctypes
import ctypes.util
import os
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import VARIANTS, AttnConfig, attend
from .linalg import make_rng

REGIMES = ("tied", "fixed-m")
CSV_COLUMNS = ("variant", "regime", "n_l", "n_c", "d", "r", "median_ms", "p10_ms", "p90_ms")
THREAD_ENV_VARS = (
    "OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "BLIS_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS",
)
MIN_TICKS = 20
# sub-millisecond calls are dominated by scheduler and cache jitter when
# sampled one at a time; each sample spans at least this long
MIN_SAMPLE_S = 0.01


_M_TRIM_THRESHOLD, _M_MMAP_THRESHOLD = -1, -3


def pin_allocator():
    """Keep glibc from returning N x d temporaries to the OS between calls.

    By default large blocks are mmapped fresh per allocation, so every call
    pays page faults proportional to its temporaries and the timings measure
    the allocator as much as the arithmetic.  Blocks up to 32 MB now come from
    the heap and stay mapped.  Returns False where glibc is not available.
    """
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        return bool(libc.mallopt(_M_MMAP_THRESHOLD, 32 << 20)) and bool(libc.mallopt(_M_TRIM_THRESHOLD, 128 << 20))
    except (OSError, AttributeError):
        return False


class BenchEnvironmentError(RuntimeError):
    """The process is configured for multi-threaded BLAS."""


@dataclass(frozen=True)
class BenchSpec:
    variants: tuple = VARIANTS
    grid: tuple = (256, 512, 1024, 2048, 4096, 8192)
    regime: str = "tied"
    m: int = 128
    d: int = 64
    r: int = 8
    reps: int = 7
    warmup: int = 2
    seed: int = 0
    cache_disabled: bool = True

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ValueError(f"unknown variants {bad}")
        if self.reps < 3:
            raise ValueError("need at least 3 repetitions")
        if self.warmup < 0:
            raise ValueError("warmup must be non-negative")
        g = list(self.grid)
        if not g or any(b <= a for a, b in zip(g, g[1:])) or g[0] < 1:
            raise ValueError("grid must be strictly increasing positive integers")
        if not 1 <= self.r <= self.d:
            raise ValueError("rank must lie in [1, d]")

    def n_c(self, n):
        return n if self.regime == "tied" else self.m


@dataclass
class BenchRow:
    variant: str
    regime: str
    n_l: int
    n_c: int
    d: int
    r: int
    median_ms: float
    p10_ms: float
    p90_ms: float
    inner_loops: int = field(default=1, compare=False)

    def csv_row(self):
        return [self.variant, self.regime, self.n_l, self.n_c, self.d, self.r,
                f"{self.median_ms:.6f}", f"{self.p10_ms:.6f}", f"{self.p90_ms:.6f}"]


def check_single_thread_env(environ=None):
    """Raise if any BLAS/OpenMP thread variable asks for more than one thread."""
    environ = os.environ if environ is None else environ
    for var in THREAD_ENV_VARS:
        val = environ.get(var)
        if val is None or val.strip() == "":
            continue
        try:
            n = int(val.split(",")[0])
        except ValueError:
            raise BenchEnvironmentError(f"{var}={val!r} is not a thread count") from None
        if n > 1:
            raise BenchEnvironmentError(f"{var}={val} requests {n} threads; the benchmark is single-thread only")


def cell_inputs(spec, n):
    """Inputs for one grid cell; identical across variants and runs."""
    rng = make_rng([spec.seed, n])
    d = spec.d
    H = rng.standard_normal((n, d))
    C = rng.standard_normal((spec.n_c(n), d))
    scale = 1.0 / np.sqrt(d)
    W = [rng.standard_normal((d, d)) * scale for _ in range(3)]
    return H, C, W


def _timer_tick():
    info = time.get_clock_info("perf_counter")
    return max(info.resolution, 1e-9)


def _calibrate(fn, warmup):
    """Run ``warmup`` discarded calls, then pick how many calls one sample
    loops over so it spans at least ``MIN_TICKS`` timer ticks and
    ``MIN_SAMPLE_S`` seconds."""
    for _ in range(warmup):
        fn()
    t0 = time.perf_counter()
    fn()
    one = time.perf_counter() - t0
    floor = max(MIN_TICKS * _timer_tick(), MIN_SAMPLE_S)
    return 1 if one >= floor else int(np.ceil(floor / max(one, 1e-9)))


def _sample(fn, inner):
    t0 = time.perf_counter()
    for _ in range(inner):
        fn()
    return (time.perf_counter() - t0) / inner


def time_cell(fn, reps, warmup):
    """Per-call times (seconds) for ``reps`` repetitions after ``warmup``
    discarded calls, plus the number of calls looped per sample."""
    inner = _calibrate(fn, warmup)
    return np.array([_sample(fn, inner) for _ in range(reps)]), inner


def run_bench(spec, progress=None):
    """Run every (variant, N) cell single-threaded.  Returns BenchRows in
    grid order, variants within a cell in the spec's order.

    Repetitions are interleaved round-robin over the cells, so a burst of
    machine noise lands on one sample of many cells instead of every sample
    of one cell, and the per-cell median discards it.  One untimed call
    precedes every sample so it does not start from caches the other cells
    evicted.
    """
    check_single_thread_env()
    pin_allocator()
    cells = []
    with threadpool_limits(limits=1):
        for n in spec.grid:
            H, C, (W_Q, W_K, W_V) = cell_inputs(spec, n)
            for variant in spec.variants:
                cfg = AttnConfig(variant, rank=min(spec.r, n, spec.d), seed=spec.seed,
                                 cache=not spec.cache_disabled)

                def call(cfg=cfg, H=H, C=C, W=(W_Q, W_K, W_V)):
                    return attend(H, C, *W, cfg)

                cells.append((n, variant, call, _calibrate(call, spec.warmup)))
        samples = [[] for _ in cells]
        for _ in range(spec.reps):
            for k, (_, _, call, inner) in enumerate(cells):
                call()  # re-warm caches after the other cells ran
                samples[k].append(_sample(call, inner))
    rows = []
    for (n, variant, _, inner), times in zip(cells, samples):
        p10, med, p90 = np.percentile(np.array(times) * 1e3, [10, 50, 90])
        row = BenchRow(variant, spec.regime, n, spec.n_c(n), spec.d, spec.r,
                       float(med), float(p10), float(p90), inner)
        rows.append(row)
        if progress:
            progress(row)
    return rows


@dataclass
class ScalingFit:
    slope: float
    intercept: float
    r2: float


def fit_scaling(rows, by="n_l"):
    """Least-squares fit of ``log(median) = slope * log(N) + b`` per variant."""
    groups = {}
    for row in rows:
        groups.setdefault(row.variant, []).append((getattr(row, by), row.median_ms))
    fits = {}
    for variant, pts in groups.items():
        if len(pts) < 4:
            raise ValueError(f"{variant}: need at least 4 grid points, got {len(pts)}")
        x = np.log([p[0] for p in pts])
        y = np.log([p[1] for p in pts])
        A = np.column_stack([x, np.ones_like(x)])
        (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
        resid = y - A @ np.array([slope, icpt])
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
        fits[variant] = ScalingFit(float(slope), float(icpt), r2)
    return fits


def write_csv(fh, rows):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in rows:
        w.writerow(row.csv_row())
