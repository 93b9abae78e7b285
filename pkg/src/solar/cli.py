"""Command-line entry point: ``solar {svd,datagen,train,verify,bench}``.

Exit codes: 0 success, 1 invalid invocation or input, 2 a verification
check failed.  Every output file is written to a temp file and renamed into
place.  ``--config FILE`` reads ``key=value`` lines (keys are flag names);
flags on the command line override the file.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys

import numpy as np

from . import __version__
from .fileio import atomic_write_text

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class UsageError(Exception):
    def __init__(self, message, parser):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self)


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _nonneg_float(text):
    v = float(text)
    if not v >= 0 or not np.isfinite(v):
        raise argparse.ArgumentTypeError(f"expected a finite non-negative number, got {text}")
    return v


def _int_list(text):
    try:
        vals = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text}") from None
    if any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("grid sizes must be positive")
    return vals


def _name_list(choices):
    def parse(text):
        vals = tuple(t.strip() for t in text.split(",") if t.strip())
        bad = [v for v in vals if v not in choices]
        if bad or not vals:
            raise argparse.ArgumentTypeError(f"choose from {','.join(choices)}; got {text}")
        return vals
    return parse


# -- subcommands -------------------------------------------------------------------

def cmd_svd(args):
    from .linalg import format_row, read_matrix_csv
    from .randsvd import randomized_svd

    H = read_matrix_csv(args.input)
    f = randomized_svd(H, args.rank, n_iter=args.iters, rng=args.seed, stabilized=args.stabilized)
    lines = [format_row(f.s)] + [format_row(row) for row in f.V]
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_datagen(args):
    from .datagen import FlipSpec, format_instance, gen_catalog, gen_dataset

    flip = FlipSpec(a=args.a, b=args.b, intercept=args.intercept,
                    shared_component_strength=args.shared_strength)
    catalog = gen_catalog(args.vocab, args.dim, args.true_rank, seed=args.seed,
                          shared_strength=args.shared_strength, n_clusters=args.clusters)
    data = gen_dataset(catalog, args.users, n_hist=args.hist, m=args.m, flip=flip, seed=args.seed + 1)
    atomic_write_text(args.out, "".join(format_instance(inst) + "\n" for inst in data))
    return EXIT_OK


METRIC_COLUMNS = ("epoch", "loss", "auc", "uauc", "risk")


def _metrics_text(history):
    return _csv_text(METRIC_COLUMNS, [[row["epoch"]] + [format(row[k], ".10g") for k in METRIC_COLUMNS[1:]]
                                      for row in history])


def cmd_train(args):
    from .attention import AttnConfig
    from .datagen import read_dataset
    from .model import TrainConfig, TrainingDiverged, init_params, train

    data = read_dataset(args.data)
    if not data:
        raise ValueError(f"{args.data}: no records")
    eval_set = read_dataset(args.eval) if args.eval else None
    vocab = 1 + max(int(max(inst.history.max(), inst.candidates.max()))
                    for inst in data + (eval_set or []))
    cfg = AttnConfig(args.variant, rank=args.rank, apply_softmax=not args.no_softmax, seed=args.seed)
    params = init_params(vocab, args.dim, cfg, args.blocks, seed=args.seed, normalize=args.normalize)
    tcfg = TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
                       loss=args.loss)
    try:
        _, history = train(params, data, tcfg, eval_instances=eval_set)
    except TrainingDiverged as exc:
        if args.metrics:
            atomic_write_text(args.metrics, _metrics_text(exc.history))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if args.metrics:
        atomic_write_text(args.metrics, _metrics_text(history))
    last = history[-1] if history else None
    if last:
        print(f"epoch {last['epoch']} loss {last['loss']:.6f} auc {last['auc']:.4f} "
              f"uauc {last['uauc']:.4f} risk {last['risk']:.4f}")
    return EXIT_OK


REPORT_COLUMNS = ("check", "measured", "expected", "tolerance", "pass")


def cmd_verify(args):
    from .verify import GRAD_COLUMNS, SUITES, run_suites

    names = list(SUITES) if args.suite == "all" else [args.suite]
    reports, grad_rows = run_suites(names, args.seed)
    rows = [[r.row()[c] for c in REPORT_COLUMNS] for r in reports]
    text = _csv_text(REPORT_COLUMNS, rows)
    if args.report:
        atomic_write_text(args.report, text)
    else:
        sys.stdout.write(text)
    if grad_rows is not None and args.grad_csv:
        atomic_write_text(args.grad_csv, _csv_text(
            GRAD_COLUMNS, [[i, b, format(e, ".6g"), c] for i, b, e, c in grad_rows]))
    failed = [r.check for r in reports if not r.passed]
    for name in failed:
        print(f"FAIL {name}", file=sys.stderr)
    return EXIT_FAILED if failed else EXIT_OK


def cmd_bench(args):
    from .bench import BenchSpec, fit_scaling, run_bench, write_csv

    spec = BenchSpec(variants=args.variants, grid=args.n, regime=args.regime, m=args.m, d=args.d,
                     r=args.rank, reps=args.reps, warmup=args.warmup, seed=args.seed)

    def progress(row):
        print(f"{row.variant:8s} n_l={row.n_l:6d} n_c={row.n_c:6d} median {row.median_ms:10.4f} ms",
              file=sys.stderr)

    rows = run_bench(spec, progress=progress)
    buf = io.StringIO()
    write_csv(buf, rows)
    if args.csv:
        atomic_write_text(args.csv, buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    if len(spec.grid) >= 4:
        for variant, fit in fit_scaling(rows).items():
            print(f"{variant}: slope {fit.slope:.3f} r2 {fit.r2:.4f}", file=sys.stderr)
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def build_parser():
    from .attention import VARIANTS
    from .bench import REGIMES
    from .model import BLOCKS, LOSSES
    from .randsvd import DEFAULT_N_ITER
    from .verify import SUITES

    p = _Parser(prog="solar", description="SVD-attention ranking toolkit.")
    p.add_argument("--version", action="store_true", help="print build id and default tolerances")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help, description=help)
        sp.add_argument("--config", help="file of key=value lines; flags override it")
        sp.set_defaults(func=fn)
        return sp

    s = add("svd", cmd_svd, "randomized truncated SVD of a matrix CSV")
    s.add_argument("--input", required=True, help="matrix CSV (rows,cols header)")
    s.add_argument("--rank", type=_positive_int, required=True)
    s.add_argument("--iters", type=_nonneg_int, default=DEFAULT_N_ITER)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--stabilized", action="store_true", help="re-orthonormalize after every power step")
    s.add_argument("--out", required=True, help="s on line 1, then the rows of V")

    s = add("datagen", cmd_datagen, "synthetic ranking requests with contextual flips")
    s.add_argument("--users", type=_positive_int, default=1000)
    s.add_argument("--vocab", type=_positive_int, default=1000)
    s.add_argument("--dim", type=_positive_int, default=32)
    s.add_argument("--true-rank", type=_positive_int, default=8)
    s.add_argument("--hist", type=_positive_int, default=50)
    s.add_argument("--m", type=_positive_int, default=50)
    s.add_argument("--a", type=_nonneg_float, default=2.0)
    s.add_argument("--b", type=_nonneg_float, default=4.0)
    s.add_argument("--intercept", type=float, default=0.0)
    s.add_argument("--shared-strength", type=_nonneg_float, default=0.0)
    s.add_argument("--clusters", type=_nonneg_int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = add("train", cmd_train, "train the ranker and record per-epoch metrics")
    s.add_argument("--data", required=True)
    s.add_argument("--eval", help="held-out requests for metrics (default: the training data)")
    s.add_argument("--variant", choices=VARIANTS, default="svd")
    s.add_argument("--rank", type=_positive_int, default=8)
    s.add_argument("--no-softmax", action="store_true")
    s.add_argument("--blocks", choices=tuple(BLOCKS), default="both")
    s.add_argument("--dim", type=_positive_int, default=32)
    s.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=True,
                   help="unit-normalize each residual branch (default on)")
    s.add_argument("--loss", choices=LOSSES, default="listwise")
    s.add_argument("--lr", type=_nonneg_float, default=0.05)
    s.add_argument("--epochs", type=_nonneg_int, default=20)
    s.add_argument("--batch-size", type=_positive_int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--metrics", help="CSV with epoch,loss,auc,uauc,risk")

    s = add("verify", cmd_verify, "numerical checks; exit 2 if any fails")
    s.add_argument("--suite", choices=("all",) + SUITES, default="all")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report", help="CSV with check,measured,expected,tolerance,pass (default stdout)")
    s.add_argument("--grad-csv", help="per-instance gradient rows (gradient suite only)")

    s = add("bench", cmd_bench, "single-thread forward latency of the attention variants")
    s.add_argument("--regime", choices=REGIMES, default="tied")
    s.add_argument("--n", type=_int_list, default=(256, 512, 1024, 2048, 4096, 8192))
    s.add_argument("--m", type=_positive_int, default=128)
    s.add_argument("--d", type=_positive_int, default=64)
    s.add_argument("--rank", type=_positive_int, default=8)
    s.add_argument("--variants", type=_name_list(VARIANTS), default=VARIANTS)
    s.add_argument("--reps", type=_positive_int, default=7)
    s.add_argument("--warmup", type=_nonneg_int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--csv")
    return p


def _config_tokens(path, parser):
    """Turn ``key=value`` lines into flag tokens for ``parser``."""
    flags = {}
    for action in parser._actions:
        for opt in action.option_strings:
            if opt.startswith("--"):
                flags[opt[2:]] = action
    tokens = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = (t.strip() for t in line.partition("="))
            key = key.replace("_", "-")
            if not sep or not key:
                raise UsageError(f"{path}:{lineno}: expected key=value", parser)
            action = flags.get(key)
            if action is None or key in ("config", "help"):
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}", parser)
            if action.nargs == 0 or isinstance(action, argparse.BooleanOptionalAction):
                on = value.lower()
                if on not in ("true", "false", "1", "0", "yes", "no"):
                    raise UsageError(f"{path}:{lineno}: {key} takes true or false", parser)
                if on in ("true", "1", "yes"):
                    tokens.append(f"--{key}")
                elif isinstance(action, argparse.BooleanOptionalAction):
                    tokens.append(f"--no-{key}")
            else:
                tokens += [f"--{key}", value]
    return tokens


def _version_text():
    from .verify import TOLERANCES

    lines = [f"solar {__version__} (numpy {np.__version__})", "default tolerances:"]
    lines += [f"  {k} = {v:g}" for k, v in TOLERANCES.items()]
    return "\n".join(lines) + "\n"


def _config_path(argv):
    """Value of ``--config`` in ``argv`` (either spelling), or None."""
    for k, tok in enumerate(argv):
        if tok == "--config" and k + 1 < len(argv):
            return argv[k + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def dispatch(argv=None):
    """Parse ``argv`` and run the subcommand; returns the exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    subs = parser._subparsers._group_actions[0].choices
    try:
        named = [k for k, a in enumerate(argv) if a in subs]
        path = _config_path(argv[named[0] + 1:]) if named else None
        if path is not None:
            # file values go right after the subcommand so later flags win
            i = named[0]
            try:
                tokens = _config_tokens(path, subs[argv[i]])
            except OSError as exc:
                raise UsageError(f"cannot read config: {exc}", subs[argv[i]]) from None
            argv = argv[:i + 1] + tokens + argv[i + 1:]
        args = parser.parse_args(argv)
        if args.version:
            sys.stdout.write(_version_text())
            return EXIT_OK
        if args.command is None:
            raise UsageError("a subcommand is required", parser)
    except UsageError as exc:
        target = exc.parser
        if target is parser:
            # unknown extras are reported by the top-level parser; show the
            # help of the subcommand they were meant for
            named = [a for a in argv if a in subs]
            target = subs[named[0]] if named else parser
        target.print_help(sys.stderr)
        print(f"\nerror: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
