"""Wall-clock scaling harness and demo table generator.

Reproduces the scaling stress test at desk scale: a single forward (or
forward+backward) pass of one attention layer, 1 batch and several heads run
sequentially, timed over a grid of sequence lengths. Exact quadratic methods
are auto-skipped once their projected cost exceeds the time budget; an
optional memory guard skips configurations whose estimated footprint is too
large. Guarded rows are still emitted so partial results always survive.

Output is CSV with the fixed schema in BENCH_CSV_COLUMNS.
"""

from __future__ import annotations

import dataclasses
import math
import resource
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .backward import race_attention_vjp
from .core import SketchConfig
from .exact import (
    AttnInputs,
    angular_attention,
    angular_attention_vjp,
    softmax_attention,
    softmax_attention_vjp,
)
from .forward import race_attention

METHODS = ("race", "softmax_exact", "angular_exact")
PASS_KINDS = ("forward", "forward_backward")

BENCH_CSV_COLUMNS = (
    "method",
    "N",
    "d",
    "heads",
    "P",
    "L",
    "M",
    "beta",
    "causal",
    "pass_kind",
    "wall_seconds",
    "peak_bytes",
    "seed",
    "status",
)

# cost ~ N**exponent per method; used to project the next grid point's runtime
_SCALING_EXPONENT = {"race": 1.0, "softmax_exact": 2.0, "angular_exact": 2.0}


@dataclass(frozen=True)
class BenchMethod:
    """One benchmarked configuration: a method plus its parameters."""

    method: str
    sketch: SketchConfig | None = None
    gamma: int = 8
    causal: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.method == "race" and self.sketch is None:
            raise ValueError("race method needs a SketchConfig")

    @property
    def is_causal(self) -> bool:
        if self.method == "race":
            return self.sketch.causal
        return self.causal


@dataclass(frozen=True)
class BenchRecord:
    method: str
    n: int
    dim: int
    heads: int
    hyperplanes: int | None
    tables: int | None
    ensembles: int | None
    beta: float | None
    causal: bool
    pass_kind: str
    wall_seconds: float | None
    peak_bytes: int
    seed: int
    status: str
    threads: int = 1

    def to_csv_row(self, extended: bool = False) -> str:
        def fmt(x):
            if x is None:
                return ""
            if isinstance(x, bool):
                return "true" if x else "false"
            if isinstance(x, float):
                return f"{x:.6g}"
            return str(x)

        fields = [
            self.method,
            self.n,
            self.dim,
            self.heads,
            self.hyperplanes,
            self.tables,
            self.ensembles,
            self.beta,
            self.causal,
            self.pass_kind,
            self.wall_seconds,
            self.peak_bytes,
            self.seed,
            self.status,
        ]
        if extended:
            fields.append(self.threads)
        return ",".join(fmt(f) for f in fields)


def bench_csv_header(extended: bool = False) -> str:
    cols = list(BENCH_CSV_COLUMNS)
    if extended:
        cols.append("threads")
    return ",".join(cols)


def records_to_csv(records, extended: bool = False) -> str:
    lines = [bench_csv_header(extended)]
    lines.extend(r.to_csv_row(extended) for r in records)
    return "\n".join(lines) + "\n"


def estimate_peak_bytes(
    method: str, n: int, dim: int, dtype, sketch: SketchConfig | None
) -> int:
    """Rough per-head working-set estimate used only by the memory guard."""
    item = np.dtype(dtype).itemsize
    base = 10 * n * dim * item  # q, k, v, o, d_out plus gradients
    if method == "race":
        block = min(sketch.block_size, n)
        r = sketch.n_buckets
        return int(base + 4 * block * r * dim * 8 + 4 * n * r * item)
    return int(base + 3 * n * n * item)


def _peak_rss_bytes() -> int:
    # ru_maxrss is in kilobytes on Linux; best-effort high-watermark
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024


def _make_head_inputs(rng, n, dim, dtype, heads):
    per_head = []
    for _ in range(heads):
        q = rng.standard_normal((n, dim)).astype(dtype)
        k = rng.standard_normal((n, dim)).astype(dtype)
        v = rng.standard_normal((n, dim)).astype(dtype)
        d_out = rng.standard_normal((n, dim)).astype(dtype)
        per_head.append((AttnInputs(q, k, v), d_out))
    return per_head


def _run_once(spec: BenchMethod, per_head, pass_kind: str, seed: int, workers: int):
    for head_idx, (inp, d_out) in enumerate(per_head):
        if spec.method == "race":
            cfg = dataclasses.replace(spec.sketch, seed=spec.sketch.seed + head_idx)
            race_attention(inp, cfg, workers=workers)
            if pass_kind == "forward_backward":
                race_attention_vjp(inp, cfg, d_out, workers=workers)
        elif spec.method == "softmax_exact":
            softmax_attention(inp, causal=spec.causal)
            if pass_kind == "forward_backward":
                softmax_attention_vjp(inp, d_out, causal=spec.causal)
        else:
            angular_attention(inp, spec.gamma, causal=spec.causal)
            if pass_kind == "forward_backward":
                angular_attention_vjp(inp, spec.gamma, d_out, causal=spec.causal)


def bench_scaling(
    lengths,
    methods,
    repeats: int = 3,
    time_budget_s: float = 120.0,
    *,
    dim: int = 128,
    heads: int = 4,
    dtype=np.float32,
    pass_kind: str = "forward_backward",
    mem_limit_bytes: int | None = None,
    seed: int = 0,
    workers: int = 1,
) -> list[BenchRecord]:
    """Median-of-repeats wall times over a grid of sequence lengths.

    One warmup run per (method, length) is discarded. Exact methods are
    skipped with status ``time_guard`` when a quadratic extrapolation from
    the last measured point exceeds ``time_budget_s``; any method is skipped
    with ``oom_guard`` when its estimated footprint exceeds
    ``mem_limit_bytes``. Non-timing columns are deterministic per seed.
    """
    lengths = list(lengths)
    if not lengths or any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ValueError("lengths must be a non-empty increasing sequence")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if pass_kind not in PASS_KINDS:
        raise ValueError(f"pass_kind must be one of {PASS_KINDS}")

    records: list[BenchRecord] = []
    for spec in methods:
        sketch = spec.sketch
        last_measured: tuple[int, float] | None = None
        exponent = _SCALING_EXPONENT[spec.method]
        for n in lengths:
            common = dict(
                method=spec.method,
                n=n,
                dim=dim,
                heads=heads,
                hyperplanes=sketch.hyperplanes if sketch else None,
                tables=sketch.tables if sketch else None,
                ensembles=sketch.ensembles if sketch else None,
                beta=sketch.beta if sketch else None,
                causal=spec.is_causal,
                pass_kind=pass_kind,
                seed=seed,
                threads=workers,
            )
            est = estimate_peak_bytes(spec.method, n, dim, dtype, sketch)
            if mem_limit_bytes is not None and est > mem_limit_bytes:
                records.append(
                    BenchRecord(
                        **common,
                        wall_seconds=None,
                        peak_bytes=est,
                        status="oom_guard",
                    )
                )
                continue
            if last_measured is not None:
                n_prev, t_prev = last_measured
                projected = t_prev * (n / n_prev) ** exponent
                if projected > time_budget_s:
                    records.append(
                        BenchRecord(
                            **common,
                            wall_seconds=None,
                            peak_bytes=_peak_rss_bytes(),
                            status="time_guard",
                        )
                    )
                    continue

            rng = np.random.default_rng(
                np.random.SeedSequence(seed & 0xFFFFFFFFFFFFFFFF, spawn_key=(n,))
            )
            per_head = _make_head_inputs(rng, n, dim, dtype, heads)
            _run_once(spec, per_head, pass_kind, seed, workers)  # warmup
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                _run_once(spec, per_head, pass_kind, seed, workers)
                times.append(time.perf_counter() - t0)
            median = statistics.median(times)
            last_measured = (n, median)
            records.append(
                BenchRecord(
                    **common,
                    wall_seconds=median,
                    peak_bytes=_peak_rss_bytes(),
                    status="ok",
                )
            )
    return records


def median_time(records, method: str, n: int) -> float:
    for r in records:
        if r.method == method and r.n == n and r.status == "ok":
            return r.wall_seconds
    raise KeyError(f"no ok record for method={method} N={n}")


def demo_kernel_heatmap(gamma_list, resolution: int) -> tuple[list[str], list[list[float]]]:
    """Tabulate the rescaled exponential vs sharpened angular kernels on [-1, 1].

    Returns (header, rows) ready for CSV serialization: one row per dot
    product value, one column per sharpening exponent. The exponential is
    affinely rescaled to [0, 1] over the grid so the two families are
    directly comparable.
    """
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    gammas = [int(g) for g in gamma_list]
    if not gammas or any(g < 1 for g in gammas):
        raise ValueError("gamma_list must contain positive integers")
    rho = np.linspace(-1.0, 1.0, resolution)
    exp_vals = np.exp(rho)
    exp_rescaled = (exp_vals - math.exp(-1.0)) / (math.exp(1.0) - math.exp(-1.0))
    base = 1.0 - np.arccos(np.clip(rho, -1.0, 1.0)) / np.pi
    header = ["rho", "exp_rescaled"] + [f"angular_gamma{g}" for g in gammas]
    rows = []
    for i in range(resolution):
        row = [float(rho[i]), float(exp_rescaled[i])]
        row.extend(float(base[i] ** g) for g in gammas)
        rows.append(row)
    return header, rows


def heatmap_csv_text(header, rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(f"{x:.12g}" for x in row))
    return "\n".join(lines) + "\n"
