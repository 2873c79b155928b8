"""Command-line front end: train, evaluate, reproduce experiments.

Every run writes its primary output plus a manifest JSON recording the
resolved flags, dataset checksums, seed, and wall time, so any output
file can be traced back to the exact invocation that produced it.

Exit codes: 0 success, 1 usage error, 2 data error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from typing import Any, Sequence

import numpy as np

from . import __version__, sdp
from .approx import AllSubproblemsFailed, LptmlConfig, lptml, lptml_regularized
from .harness import (
    BUILTIN_DATASETS,
    LabeledDataset,
    LptmlLearner,
    NotEnoughPairs,
    cross_validate,
    generate_constraints,
    knn_accuracy,
    load_builtin,
    load_points_csv,
    pca_reduce,
    poison_dataset,
    save_points_csv,
    synth_two_gaussians,
    _dataset_dir,
    _stream_seed,
)
from .lptype import RecursionGuardExceeded
from .metric import (
    InvalidConstraint,
    MetricMatrix,
    NotPSD,
    SolverFailure,
    identity_metric,
    load_constraints,
    make_instance,
)
from .runner import resolve_workers

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_SOLVER = 3

_SOLVER_ERRORS = (AllSubproblemsFailed, SolverFailure, RecursionGuardExceeded,
                  sdp.SdpError)
_DATA_ERRORS = (NotEnoughPairs, InvalidConstraint, NotPSD, OSError,
                json.JSONDecodeError, KeyError)


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


class _Parser(argparse.ArgumentParser):
    """argparse maps usage problems to exit 2; we reserve 2 for data."""

    def error(self, message: str):
        raise CliError(EXIT_USAGE, f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# shared plumbing


def _sha256(path: Any) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _load_dataset(spec: str) -> tuple[LabeledDataset, dict[str, str]]:
    """Dataset by builtin name or CSV path, plus its checksum entry."""
    if spec in BUILTIN_DATASETS:
        ds = load_builtin(spec)
        sums = json.loads(_dataset_dir().joinpath("checksums.json").read_text())
        return ds, {spec: sums[spec]}
    try:
        ds = load_points_csv(spec, name=spec)
    except FileNotFoundError:
        raise CliError(EXIT_DATA, f"--data: {spec!r} is neither a builtin "
                                  f"({', '.join(BUILTIN_DATASETS)}) nor a readable CSV")
    except ValueError as exc:
        raise CliError(EXIT_DATA, f"--data {spec}: {exc}")
    return ds, {spec: _sha256(spec)}


def _write_manifest(out: str, command: str, args: argparse.Namespace,
                    checksums: dict[str, str], wall: float) -> None:
    flags = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "command": command,
        "flags": flags,
        "dataset_checksums": checksums,
        "master_seed": getattr(args, "seed", None),
        "version": __version__,
        "wall_time_s": round(wall, 3),
    }
    with open(f"{out}.manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _fmt(v: float) -> float:
    # 17 significant digits survive the float -> text -> float trip exactly
    return float(format(float(v), ".17g"))


def _write_model(out: str, metric: MetricMatrix, u: float, l: float) -> None:
    model = {
        "d": metric.d,
        "A": [[_fmt(v) for v in row] for row in metric.A],
        "G": [[_fmt(v) for v in row] for row in metric.G],
        "u": _fmt(u),
        "l": _fmt(l),
    }
    with open(out, "w") as fh:
        json.dump(model, fh, indent=2)
        fh.write("\n")


def _load_model(spec: str, d: int) -> tuple[MetricMatrix, float | None, float | None]:
    if spec == "identity":
        return identity_metric(d), None, None
    try:
        with open(spec) as fh:
            raw = json.load(fh)
        A = np.asarray(raw["A"], dtype=float).reshape(raw["d"], raw["d"])
        G = np.asarray(raw["G"], dtype=float).reshape(raw["d"], raw["d"])
    except FileNotFoundError:
        raise CliError(EXIT_DATA, f"--model: cannot read {spec!r}")
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_DATA, f"--model {spec}: malformed model ({exc})")
    if raw["d"] != d:
        raise CliError(EXIT_DATA, f"--model {spec}: model is {raw['d']}-dimensional, "
                                  f"data is {d}-dimensional")
    return MetricMatrix(A, G), float(raw["u"]), float(raw["l"])


def _config_from_args(args: argparse.Namespace) -> LptmlConfig:
    try:
        return LptmlConfig(
            epsilon=args.epsilon, t=args.t, master_seed=args.seed,
            workers=resolve_workers(args.workers),
        )
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"bad solver flag: {exc}")


def _constraints_for(ds: LabeledDataset, args: argparse.Namespace, seed: int):
    if getattr(args, "constraints", None):
        try:
            cs = load_constraints(args.constraints, ds.points)
        except FileNotFoundError:
            raise CliError(EXIT_DATA, f"--constraints: cannot read {args.constraints!r}")
        except (InvalidConstraint, ValueError, KeyError, json.JSONDecodeError) as exc:
            raise CliError(EXIT_DATA, f"--constraints {args.constraints}: {exc}")
        if cs.size == 0:
            raise CliError(EXIT_DATA,
                           f"--constraints {args.constraints}: file holds no constraints")
        return cs
    try:
        return generate_constraints(ds, args.n_sim, args.n_dis, seed=seed)
    except NotEnoughPairs as exc:
        raise CliError(EXIT_DATA, str(exc))


class FixedLearner:
    """Evaluate a frozen transform inside the cross-validation protocol."""

    def __init__(self, metric: MetricMatrix, name: str):
        self.metric = metric
        self.name = name
        self.config: dict[str, Any] = {}

    def __call__(self, cs, seed: int) -> MetricMatrix:
        return self.metric


# ---------------------------------------------------------------------------
# subcommands


def _cmd_train(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    ds, sums = _load_dataset(args.data)
    cfg = _config_from_args(args)
    cs = _constraints_for(ds, args, seed=_stream_seed(args.seed, 0, 1, 0))
    handles = list(range(cs.size))
    if args.eta is not None:
        res = lptml_regularized(handles, cs, cfg, eta=args.eta, reg=np.eye(cs.dim))
    else:
        res = lptml(handles, cs, cfg)
    _write_model(args.out, res.best, cs.u, cs.l)
    if args.grid_log:
        from .approx import save_grid_csv
        save_grid_csv(res.grid, args.grid_log)
    _write_manifest(args.out, "train", args, sums, time.perf_counter() - t0)
    print(f"model -> {args.out}  violations {res.violations}/{res.n_constraints} "
          f"(fraction {res.fraction:.4f}) cell {res.best_cell}")
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    ds, sums = _load_dataset(args.data)
    metric, *_ = _load_model(args.model, ds.d)
    learner = FixedLearner(metric, "identity" if args.model == "identity" else "fixed")
    report = cross_validate(ds, learner, repeats=args.repeats, seed=args.seed,
                            k=args.k, n_sim=args.n_sim, n_dis=args.n_dis)
    payload = json.loads(report.to_json())
    payload["model"] = args.model
    if args.constraints:
        cs = _constraints_for(ds, args, seed=0)
        inst = make_instance(cs, 0)
        count, fraction = inst.count_violations(metric.A)
        payload["violations"] = count
        payload["violated_fraction"] = fraction
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(args.out, "eval", args, sums, time.perf_counter() - t0)
    print(f"report -> {args.out}  accuracy {report.accuracy_mean:.4f} "
          f"+- {report.accuracy_std:.4f}")
    return EXIT_OK


def _cmd_cv(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    ds, sums = _load_dataset(args.data)
    cfg = _config_from_args(args)
    learner = LptmlLearner(cfg=cfg, eta=args.eta)
    report = cross_validate(ds, learner, repeats=args.repeats, seed=args.seed,
                            k=args.k, n_sim=args.n_sim, n_dis=args.n_dis)
    with open(args.out, "w") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    _write_manifest(args.out, "cv", args, sums, time.perf_counter() - t0)
    print(f"report -> {args.out}  accuracy {report.accuracy_mean:.4f} "
          f"+- {report.accuracy_std:.4f} over {len(report.fold_accuracies)} folds")
    return EXIT_OK


def _cmd_synth(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    ds = synth_two_gaussians(args.seed, stretch=not args.raw)
    save_points_csv(ds, args.out)
    _write_manifest(args.out, "synth", args, {args.out: _sha256(args.out)},
                    time.perf_counter() - t0)
    print(f"dataset -> {args.out}  ({ds.n} points, stretch={not args.raw})")
    return EXIT_OK


def _cmd_poison(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    clean = synth_two_gaussians(args.seed, stretch=False)
    ds = poison_dataset(clean, seed=args.poison_seed)
    save_points_csv(ds, args.out)
    _write_manifest(args.out, "poison", args, {args.out: _sha256(args.out)},
                    time.perf_counter() - t0)
    print(f"dataset -> {args.out}  ({ds.n} points, 5 planted)")
    return EXIT_OK


def _cmd_pca(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    ds, sums = _load_dataset(args.data)
    if not (1 <= args.dim <= ds.d):
        raise CliError(EXIT_USAGE, f"--dim must be in [1, {ds.d}], got {args.dim}")
    red = pca_reduce(ds, args.dim)
    save_points_csv(red, args.out)
    _write_manifest(args.out, "pca", args, sums, time.perf_counter() - t0)
    print(f"dataset -> {args.out}  ({red.n} points, d {ds.d} -> {red.d})")
    return EXIT_OK


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        if "-" in text and "," not in text:
            lo, hi = text.split("-")
            vals = list(range(int(lo), int(hi) + 1))
        else:
            vals = [int(tok) for tok in text.split(",") if tok]
        if not vals:
            raise ValueError("empty list")
        return vals
    except ValueError:
        raise CliError(EXIT_USAGE, f"{flag}: expected N,M,... or LO-HI, got {text!r}")


def _cmd_curves(args: argparse.Namespace) -> int:
    """Violated fraction and accuracy as the iteration budget grows."""
    t0 = time.perf_counter()
    ds, sums = _load_dataset(args.data)
    grid = _parse_int_list(args.t_grid, "--t-grid")
    split_rng = np.random.default_rng(np.random.SeedSequence(args.seed, spawn_key=(0, 0)))
    chunks: list[list[np.ndarray]] = [[], []]
    for c in range(ds.n_classes):
        idx = split_rng.permutation(ds.class_indices(c))
        for f, part in enumerate(np.array_split(idx, 2)):
            chunks[f].append(part)
    train = ds.subset(np.sort(np.concatenate(chunks[0])))
    test = ds.subset(np.sort(np.concatenate(chunks[1])))
    cs = generate_constraints(train, args.n_sim, args.n_dis,
                              seed=_stream_seed(args.seed, 0, 1, 0))
    rows = []
    for t in grid:
        cfg = LptmlConfig(epsilon=args.epsilon, t=t,
                          master_seed=_stream_seed(args.seed, 0, 2, 0),
                          workers=resolve_workers(args.workers))
        res = lptml(list(range(cs.size)), cs, cfg)
        acc = knn_accuracy(train, test, res.best, k=args.k)
        rows.append((t, res.fraction, acc))
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iterations", "violated_fraction", "accuracy"])
        for t, frac, acc in rows:
            writer.writerow([t, f"{frac:.6f}", f"{acc:.6f}"])
    _write_manifest(args.out, "curves", args, sums, time.perf_counter() - t0)
    print(f"curves -> {args.out}  ({len(rows)} budgets)")
    return EXIT_OK


def _cmd_bench(args: argparse.Namespace) -> int:
    """Median solve time per PCA dimension; the scaling-trend experiment."""
    t0 = time.perf_counter()
    ds, sums = _load_dataset(args.data)
    dims = _parse_int_list(args.dims, "--dims")
    if max(dims) > ds.d:
        raise CliError(EXIT_USAGE, f"--dims: {max(dims)} exceeds data dimension {ds.d}")
    rows = []
    for d in dims:
        red = pca_reduce(ds, d)
        cs = generate_constraints(red, args.n_sim, args.n_dis,
                                  seed=_stream_seed(args.seed, d, 0, 0))
        times = []
        for run in range(args.runs):
            cfg = LptmlConfig(epsilon=args.epsilon, t=args.t,
                              master_seed=_stream_seed(args.seed, d, 1, run),
                              workers=resolve_workers(args.workers))
            tic = time.perf_counter()
            lptml(list(range(cs.size)), cs, cfg)
            times.append(time.perf_counter() - tic)
        rows.append((d, float(np.median(times)), args.runs))
        print(f"d={d}: median {rows[-1][1]:.3f}s over {args.runs} runs")
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["d", "median_seconds", "runs"])
        for d, med, runs in rows:
            writer.writerow([d, f"{med:.6f}", runs])
    _write_manifest(args.out, "bench", args, sums, time.perf_counter() - t0)
    print(f"bench -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--t", type=int, default=2000,
                   help="total grid cells / inner iterations (default 2000)")
    p.add_argument("--epsilon", type=float, default=0.2,
                   help="approximation parameter (default 0.2)")
    p.add_argument("--workers", type=int, default=None,
                   help="worker processes (default: LPTML_WORKERS or 1)")


def _add_constraint_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-sim", type=int, default=None,
                   help="similarity pairs to sample (default min(500, pool))")
    p.add_argument("--n-dis", type=int, default=None,
                   help="dissimilarity pairs to sample (default min(500, pool))")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lptml",
                     description="Metric learning by minimizing violated "
                                 "pairwise constraints")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="learn a metric and write a model JSON")
    p.add_argument("--data", required=True, help="points CSV or builtin name")
    p.add_argument("--constraints", default=None,
                   help="constraint CSV (with JSON sidecar); default: sample by label")
    _add_constraint_flags(p)
    _add_solver_flags(p)
    p.add_argument("--eta", type=float, default=None,
                   help="trace regularization weight (default off)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid-log", default=None, help="optional per-cell CSV log")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a model (or 'identity') by k-NN CV")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="model JSON path or 'identity'")
    p.add_argument("--constraints", default=None,
                   help="also report exact violations on this constraint file")
    _add_constraint_flags(p)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("cv", help="end-to-end cross-validated metric learning")
    p.add_argument("--data", required=True)
    _add_constraint_flags(p)
    _add_solver_flags(p)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_cv)

    p = sub.add_parser("synth", help="two-Gaussian synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--raw", action="store_true", help="skip the y-axis stretch")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("poison", help="synthetic dataset with 5 planted points")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--poison-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_poison)

    p = sub.add_parser("pca", help="project a dataset to fewer dimensions")
    p.add_argument("--data", required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_pca)

    p = sub.add_parser("curves", help="violations and accuracy vs iteration budget")
    p.add_argument("--data", required=True)
    p.add_argument("--t-grid", required=True, help="budgets, e.g. 50,200,1000 or 10-100")
    _add_constraint_flags(p)
    p.add_argument("--epsilon", type=float, default=0.2)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_curves)

    p = sub.add_parser("bench", help="median runtime per PCA dimension")
    p.add_argument("--data", default="wine")
    p.add_argument("--dims", default="2-8", help="e.g. 2-8 or 2,4,8")
    _add_constraint_flags(p)
    p.add_argument("--t", type=int, default=60)
    p.add_argument("--epsilon", type=float, default=0.2)
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc.message}", file=sys.stderr)
        return exc.code
    except _SOLVER_ERRORS as exc:
        print(f"solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except _DATA_ERRORS as exc:
        print(f"data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
