"""Command-line interface: ``motfm simulate | fit | ranks | map | bench``.

Exit status: 0 success, 1 usage error, 2 data or format error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from motfm.covariance import sigma_hat_global
from motfm.errors import MotfmError, NumericalError, StageError
from motfm.estimation import fit
from motfm.io import (
    read_collection,
    read_dgp_spec,
    read_matrix,
    read_rank_profile,
    read_tensor_file,
    write_collection,
    write_matrix,
    write_rank_profile,
    write_tensor_file,
)
from motfm.ranks import DEFAULT_C_XI, select_ranks
from motfm.simulation import (
    SETTINGS,
    generate,
    get_setting,
    rel_mse,
    replication_seed,
    run_setting,
    space_distance,
)
from motfm.subsample import draw_index_sets, sigma_hat_global_sub
from motfm.tensor import Channel, inverse_map, map_op

log = logging.getLogger("motfm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    return max(1, int(os.environ.get("MOTFM_THREADS", "1")))


def _prepare_out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------------ simulate

def write_truth(truth, names, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for m, name in enumerate(names):
        for k, a in enumerate(truth.global_loadings[m]):
            write_matrix(directory / f"A_{name}_mode{k}.csv", a)
        for k, b in enumerate(truth.local_loadings[m]):
            if b.shape[1]:
                write_matrix(directory / f"B_{name}_mode{k}.csv", b)
        write_tensor_file(directory / f"XG_{name}.motf", truth.global_components[m])
        write_tensor_file(directory / f"XF_{name}.motf", truth.local_components[m])


def write_dataset(spec, directory) -> Path:
    c, truth = generate(spec)
    manifest = write_collection(c, directory, overwrite=True)
    write_truth(truth, c.names, Path(directory) / "truth")
    write_rank_profile(Path(directory) / "ranks.toml", spec.ranks, c.names)
    return manifest


def _budget_override(budget):
    # 0 requests the full covariance, None keeps the setting's default
    if budget is None:
        return {}
    return {"budget": budget if budget > 0 else None}


def cmd_simulate(args) -> int:
    out = _prepare_out(args.out)
    if args.spec:
        spec = read_dgp_spec(args.spec)
        manifest = write_dataset(spec, out / "data")
        print(f"wrote {manifest}")
        return EXIT_OK
    if not args.setting:
        raise UsageError("simulate needs --setting or --spec")
    setting = get_setting(args.setting)
    grid = args.t if setting.grid_name == "T" else args.p
    overrides = {"strength": args.strength, "noise": args.noise}
    report = run_setting(
        setting.name, reps=args.reps, seed=args.seed, grid=grid,
        workers=_threads(args), c_xi=args.c_xi,
        **_budget_override(args.budget), **overrides,
    )
    (out / "report.csv").write_text(report.to_csv())
    (out / "summary.txt").write_text(report.summary())
    print(report.summary(), end="")
    log.info("%d replications in %.2f s", report.reps * len(report.cells), report.elapsed)
    if not args.no_data:
        first = report.cells[0]
        spec = setting.spec(first, replication_seed(args.seed, 0, 0), **overrides)
        write_dataset(spec, out / "data")
    return EXIT_OK


# ---------------------------------------------------------------------- fit

def _load_truth(directory, c):
    directory = Path(directory)
    truth = {"A": {}, "B": {}, "XG": {}, "XF": {}}
    for m, name in enumerate(c.names):
        for k in range(c[m].order):
            for key in ("A", "B"):
                f = directory / f"{key}_{name}_mode{k}.csv"
                if f.exists():
                    truth[key][m, k] = read_matrix(f)
        for key in ("XG", "XF"):
            f = directory / f"{key}_{name}.motf"
            if f.exists():
                truth[key][m] = read_tensor_file(f)
    return truth


def _metrics(result, truth, c):
    rows = []
    est = result.loadings
    for (m, k), a in truth["A"].items():
        rows.append((f"D(A[{c.names[m]}].mode{k})", space_distance(a, est.global_loadings[m][k])))
    for (m, k), b in truth["B"].items():
        if est.local_loadings[m][k].shape[1]:
            rows.append((f"D(B[{c.names[m]}].mode{k})", space_distance(b, est.local_loadings[m][k])))
    for key, comps in (("XG", result.global_components), ("XF", result.local_components)):
        for m, x in truth[key].items():
            if np.any(x):
                rows.append((f"MSE({key}[{c.names[m]}])", rel_mse(comps[m], x)))
    return rows


def cmd_fit(args) -> int:
    c = read_collection(args.manifest, demean=args.demean)
    if args.auto_ranks:
        selection = select_ranks(c, budget=args.budget, seed=args.seed, c_xi=args.c_xi)
        profile = selection.profile
    elif args.ranks:
        profile = read_rank_profile(args.ranks, c)
    else:
        raise UsageError("fit needs --ranks FILE or --auto-ranks")
    result = fit(c, profile, method=args.method, budget=args.budget, seed=args.seed)
    out = _prepare_out(args.out)
    write_rank_profile(out / "ranks.toml", profile, c.names)
    est = result.loadings
    for m, name in enumerate(c.names):
        for k in range(c[m].order):
            write_matrix(out / f"A_{name}_mode{k}.csv", est.global_loadings[m][k])
            if est.global_complements[m][k].shape[1]:
                write_matrix(out / f"Aperp_{name}_mode{k}.csv", est.global_complements[m][k])
            write_matrix(out / f"eig_global_{name}_mode{k}.csv", est.eigvals_global[m][k][None, :])
            if est.local_loadings[m][k].shape[1]:
                write_matrix(out / f"B_{name}_mode{k}.csv", est.local_loadings[m][k])
                write_matrix(out / f"eig_local_{name}_mode{k}.csv", est.eigvals_local[m][k][None, :])
        write_tensor_file(out / f"G_{name}.motf", result.global_factors[m])
        if result.local_factors[m].size:
            write_tensor_file(out / f"F_{name}.motf", result.local_factors[m])
        if args.components:
            write_tensor_file(out / f"XG_{name}.motf", result.global_components[m])
            write_tensor_file(out / f"XF_{name}.motf", result.local_components[m])
    if args.truth:
        rows = _metrics(result, _load_truth(args.truth, c), c)
        with open(out / "metrics.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["measure", "value"])
            for name, value in rows:
                writer.writerow([name, f"{value:.17g}"])
                print(f"{name:<24}{value:.6f}")
    print(f"wrote fit to {out}")
    return EXIT_OK


# -------------------------------------------------------------------- ranks

def cmd_ranks(args) -> int:
    c = read_collection(args.manifest, demean=args.demean)
    sel = select_ranks(c, budget=args.budget, seed=args.seed, c_xi=args.c_xi)
    lines = ["thread  mode  r_hat  s_hat  u_hat  xi            ratios"]
    diag_rows = []
    for m, name in enumerate(c.names):
        for k in range(c[m].order):
            d = sel.global_diagnostics[m][k]
            r, u, s = sel.profile.global_ranks[m][k], sel.profile.local_ranks[m][k], sel.totals[m][k]
            flag = " (global > total, local clamped)" if sel.clamped[m][k] else ""
            ratios = " ".join(f"{v:.4f}" for v in d.ratios)
            lines.append(f"{name:<8}{k:<6}{r:<7}{s:<7}{u:<7}{d.xi:<14.6g}{ratios}{flag}")
            for i, v in enumerate(d.ratios, start=1):
                diag_rows.append([name, k, i, f"{d.eigvals[i - 1]:.17g}", f"{v:.17g}", f"{d.xi:.17g}"])
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        out = _prepare_out(args.out)
        write_rank_profile(out / "ranks.toml", sel.profile, c.names)
        (out / "ranks.txt").write_text(text)
        with open(out / "diagnostics.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["thread", "mode", "i", "eigval", "ratio", "xi"])
            writer.writerows(diag_rows)
    return EXIT_OK


# ---------------------------------------------------------------------- map

def cmd_map(args) -> int:
    data = read_tensor_file(args.input)
    channel = Channel.parse(args.channel)
    if args.inverse:
        if not args.dims:
            raise UsageError("--inverse needs --dims")
        out = np.stack([inverse_map(x, channel, args.dims) for x in data])
    else:
        out = np.stack([map_op(x, channel) for x in data])
    write_tensor_file(args.output, out)
    print(f"{args.input}: {data.shape[1:]} -> {out.shape[1:]}")
    return EXIT_OK


# -------------------------------------------------------------------- bench

def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        value = fn()
        best = min(best, time.perf_counter() - start)
    return best, value


def cmd_bench(args) -> int:
    if args.manifest:
        c = read_collection(args.manifest)
    else:
        setting = get_setting(args.setting)
        value = args.t if setting.grid_name == "T" else args.p
        value = value if value is not None else setting.grid[0]
        c, _ = generate(setting.spec(value, args.seed))
    budget = args.budget
    rows = []
    for m in range(c.M):
        sets = draw_index_sets(c, m, budget, args.seed) if budget else None
        for k in range(c[m].order):
            t_naive, s_naive = _time(lambda: sigma_hat_global(c, m, k, "naive"), args.repeat)
            t_gram, s_gram = _time(lambda: sigma_hat_global(c, m, k, "gram"), args.repeat)
            row = [c.names[m], k, t_naive, t_gram, float(np.max(np.abs(s_naive.matrix - s_gram.matrix)))]
            if sets is not None:
                t_sn, _ = _time(lambda: sigma_hat_global_sub(c, m, k, sets, "naive"), args.repeat)
                t_sg, _ = _time(lambda: sigma_hat_global_sub(c, m, k, sets, "gram"), args.repeat)
                row += [t_sn, t_sg]
            rows.append(row)
    head = ["thread", "mode", "naive_s", "gram_s", "max_abs_diff"] + (["sub_naive_s", "sub_gram_s"] if budget else [])
    print(f"T={c.T}, dims={c.dims}, budget={budget}, best of {args.repeat}")
    print("  ".join(f"{h:>12}" for h in head))
    for row in rows:
        print("  ".join(f"{v:>12}" if isinstance(v, (str, int)) else f"{v:>12.3e}" for v in row))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(head)
            writer.writerows(rows)
    return EXIT_OK


# --------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="motfm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, seed=True):
        if seed:
            p.add_argument("--seed", type=int, default=0, help="master random seed (default 0)")
        p.add_argument("--threads", type=int, default=None,
                       help="worker processes (default: $MOTFM_THREADS or 1)")

    p = sub.add_parser("simulate", help="run a simulation setting or write one dataset from a spec file")
    p.add_argument("--setting", choices=sorted(SETTINGS), type=str.upper, help="named setting (A1..D2)")
    p.add_argument("--spec", help="TOML data-generating spec; writes a single dataset")
    p.add_argument("--reps", type=int, default=100, help="replications per grid value (default 100)")
    p.add_argument("--t", type=_int_list, default=None, help="comma-separated sample sizes (T grids)")
    p.add_argument("--p", type=_int_list, default=None, help="comma-separated dimensions (p grids)")
    p.add_argument("--strength", choices=["strong", "weak"], default=None)
    p.add_argument("--noise", choices=["gaussian", "t6"], default=None)
    p.add_argument("--budget", type=int, default=None, help="override the subsampling budget (0 = full covariance)")
    p.add_argument("--c-xi", type=float, default=DEFAULT_C_XI, help="perturbation constant for rank counts")
    p.add_argument("--no-data", action="store_true", help="skip writing the example dataset")
    p.add_argument("--out", required=True, help="output directory")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="estimate loadings, factors and components")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ranks", help="TOML rank profile")
    p.add_argument("--auto-ranks", action="store_true", help="select ranks from the data first")
    p.add_argument("--budget", type=int, default=None, help="use the subsampled covariance with this budget")
    p.add_argument("--method", choices=["gram", "naive"], default="gram")
    p.add_argument("--c-xi", type=float, default=DEFAULT_C_XI)
    p.add_argument("--demean", action=argparse.BooleanOptionalAction, default=None,
                   help="subtract time means (default: manifest flag)")
    p.add_argument("--truth", help="directory with true loadings/components for metrics")
    p.add_argument("--components", action="store_true", help="also write estimated components")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("ranks", help="select global, total and local factor counts")
    p.add_argument("--manifest", required=True)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--c-xi", type=float, default=DEFAULT_C_XI)
    p.add_argument("--demean", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--out", help="directory for ranks.toml and diagnostics.csv")
    common(p)
    p.set_defaults(func=cmd_ranks)

    p = sub.add_parser("map", help="apply a tensor map (or its inverse) to every time slice")
    p.add_argument("--input", required=True)
    p.add_argument("--channel", required=True, help='0-based mode groups, e.g. "0,1;2"')
    p.add_argument("--output", required=True)
    p.add_argument("--inverse", action="store_true")
    p.add_argument("--dims", type=_int_list, help="original dims for --inverse")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("bench", help="time naive, Gram and subsampled global covariances")
    p.add_argument("--setting", type=str.upper, default="A1")
    p.add_argument("--manifest", help="benchmark on a dataset instead of a setting")
    p.add_argument("--t", type=int, default=None)
    p.add_argument("--p", type=int, default=None)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--out", help="CSV output path")
    common(p)
    p.set_defaults(func=cmd_bench)
    return parser


def _exit_code(exc) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    return EXIT_DATA


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"motfm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MotfmError, OSError) as exc:
        print(f"motfm {args.command}: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
