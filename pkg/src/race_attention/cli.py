"""Command-line harness: scaling benchmark, validation suites, gradient
checks, and the kernel comparison demo table.

Exit codes: 0 success, 1 a check suite failed, 2 usage error. The default
seed can be set via the RACE_ATTN_SEED environment variable; an explicit
--seed flag wins.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import acceptance
from .bench import (
    METHODS,
    BenchMethod,
    bench_scaling,
    demo_kernel_heatmap,
    heatmap_csv_text,
    records_to_csv,
)
from .core import SketchConfig
from .theory import report_csv_text

_DTYPES = {"f32": np.float32, "f64": np.float64}


def _default_seed() -> int:
    try:
        return int(os.environ.get("RACE_ATTN_SEED", "0"))
    except ValueError:
        return 0


def _parse_lengths(text: str) -> list[int]:
    try:
        lengths = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ValueError(f"bad --lengths value {text!r}") from exc
    if not lengths:
        raise ValueError("--lengths must list at least one sequence length")
    return lengths


def _write_output(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        with open(out, "w") as fh:
            fh.write(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="race-attn",
        description="Sketched linear-time attention: benchmarks, validation, demos.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_bench = sub.add_parser("bench", help="wall-clock scaling benchmark (CSV output)")
    p_bench.add_argument("--lengths", default="4096,8192", help="comma-separated sequence lengths")
    p_bench.add_argument("--dim", type=int, default=128)
    p_bench.add_argument("--heads", type=int, default=4)
    p_bench.add_argument(
        "--method", default="race", help=f"comma list from {{{','.join(METHODS)}}}"
    )
    p_bench.add_argument("--P", dest="hyperplanes", type=int, default=2)
    p_bench.add_argument("--L", dest="tables", type=int, default=2)
    p_bench.add_argument("--M", dest="ensembles", type=int, default=1)
    p_bench.add_argument("--beta", type=float, default=8.0)
    p_bench.add_argument("--gamma", type=int, default=8, help="angular_exact sharpening")
    p_bench.add_argument("--seed", type=int, default=_default_seed())
    p_bench.add_argument("--causal", action="store_true")
    p_bench.add_argument("--repeats", type=int, default=3)
    p_bench.add_argument("--time-budget-s", type=float, default=120.0)
    p_bench.add_argument("--mem-limit-bytes", type=int, default=None)
    p_bench.add_argument("--threads", type=int, default=1)
    p_bench.add_argument(
        "--pass-kind", choices=("forward", "forward_backward"), default="forward_backward"
    )
    p_bench.add_argument("--dtype", choices=tuple(_DTYPES), default="f32")
    p_bench.add_argument(
        "--extended", action="store_true", help="append a threads column to the CSV"
    )
    p_bench.add_argument("--out", default=None, help="CSV path ('-' for stdout)")
    p_bench.set_defaults(func=_cmd_bench)

    p_val = sub.add_parser("validate", help="run the validation suites")
    p_val.add_argument("--quick", action="store_true", help="reduced instance counts")
    p_val.add_argument("--out", default=None, help="CSV report path")
    p_val.set_defaults(func=_cmd_validate)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p_grad.add_argument("--quick", action="store_true")
    p_grad.set_defaults(func=_cmd_gradcheck)

    p_demo = sub.add_parser("demo", help="kernel sharpening comparison table (CSV)")
    p_demo.add_argument("--gammas", default="2,4,8,12", help="comma-separated exponents")
    p_demo.add_argument("--resolution", type=int, default=64)
    p_demo.add_argument("--out", default=None, help="CSV path ('-' for stdout)")
    p_demo.set_defaults(func=_cmd_demo)
    return parser


def _cmd_bench(args) -> int:
    lengths = _parse_lengths(args.lengths)
    methods = []
    for name in (tok.strip() for tok in args.method.split(",")):
        if not name:
            continue
        if name not in METHODS:
            raise ValueError(f"unknown method {name!r}; choose from {METHODS}")
        sketch = None
        if name == "race":
            sketch = SketchConfig(
                hyperplanes=args.hyperplanes,
                tables=args.tables,
                ensembles=args.ensembles,
                beta=args.beta,
                seed=args.seed,
                causal=args.causal,
            )
        methods.append(
            BenchMethod(method=name, sketch=sketch, gamma=args.gamma, causal=args.causal)
        )
    if not methods:
        raise ValueError("--method selected no methods")
    records = bench_scaling(
        lengths,
        methods,
        repeats=args.repeats,
        time_budget_s=args.time_budget_s,
        dim=args.dim,
        heads=args.heads,
        dtype=_DTYPES[args.dtype],
        pass_kind=args.pass_kind,
        mem_limit_bytes=args.mem_limit_bytes,
        seed=args.seed,
        workers=args.threads,
    )
    _write_output(records_to_csv(records, extended=args.extended), args.out)
    return 0


def _cmd_validate(args) -> int:
    results = acceptance.run_validation(quick=args.quick)
    print(acceptance.format_results(results))
    if args.out:
        _write_output(report_csv_text(acceptance.collect_report_rows(results)), args.out)
    return 0 if all(r.passed for r in results) else 1


def _cmd_gradcheck(args) -> int:
    result = acceptance.check_gradients(quick=args.quick)
    print(acceptance.format_results([result]))
    return 0 if result.passed else 1


def _cmd_demo(args) -> int:
    try:
        gammas = [int(tok) for tok in args.gammas.split(",") if tok.strip()]
    except ValueError as exc:
        raise ValueError(f"bad --gammas value {args.gammas!r}") from exc
    header, rows = demo_kernel_heatmap(gammas, args.resolution)
    _write_output(heatmap_csv_text(header, rows), args.out)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
