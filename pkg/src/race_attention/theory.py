"""Empirical checks of the estimator's bias-variance behavior.

The approximation error of the sketched estimator against the exact angular
reference (sharpening exponent equal to the hyperplane count) decomposes into
a smoothing bias that shrinks like 1/beta and a Monte-Carlo variance that
shrinks like 1/sqrt(tables). The sweeps here measure both scaling shapes, the
collision-probability identity behind the estimator, and the row-sum margin
that keeps normalization stable.

Statistical checks use standard-error bands and seed averaging; point
assertions on random quantities would be flaky by design.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .core import SketchConfig, as_matrix, derive_table_rng, gaussian_matrix
from .exact import AttnInputs, angular_attention, angular_kernel_matrix
from .forward import RaceOutput, prepared_qk, race_attention, race_kernel

# Constants of the analytic bias bound (~ 4/sqrt(2*pi) * P/beta plus an
# exp(-c*beta) tail). Recorded in reports for reference; only scaling shapes
# are asserted, the constants are not claimed tight.
BIAS_LINEAR_CONSTANT = 4.0 / math.sqrt(2.0 * math.pi)
BIAS_EXP_RATE = 2.0 * math.tanh(1.0)

DEFAULT_DELTA = 0.01  # failure probability used when evaluating bound expressions

COLLISION_ANGLES = (math.pi / 6, math.pi / 3, math.pi / 2, 2 * math.pi / 3)


def output_rms_error(o_hat, o) -> float:
    """Per-token RMS error sqrt(mean_i ||o_hat_i - o_i||^2)."""
    o_hat = as_matrix(o_hat, "o_hat")
    o = as_matrix(o, "o")
    if o_hat.shape != o.shape:
        raise ValueError(f"shape mismatch: {o_hat.shape} vs {o.shape}")
    diff = o_hat.astype(np.float64) - o.astype(np.float64)
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


@dataclass(frozen=True)
class ScalingExperiment:
    """One sweep: grid of parameter values, seed-averaged errors, log-log fit."""

    name: str
    grid: np.ndarray
    errors: np.ndarray
    std_errors: np.ndarray
    seed_count: int
    fit_slope: float
    fit_r2: float

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.float64)
        errors = np.asarray(self.errors, dtype=np.float64)
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if np.any(errors <= 0):
            raise ValueError("errors must be positive")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "errors", errors)
        object.__setattr__(self, "std_errors", np.asarray(self.std_errors, dtype=np.float64))


def _loglog_fit(grid: np.ndarray, errors: np.ndarray) -> tuple[float, float]:
    x = np.log(np.asarray(grid, dtype=np.float64))
    y = np.log(np.asarray(errors, dtype=np.float64))
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return float(slope), float(r2)


def _check_grid(grid, name: str, min_points: int = 3):
    grid = list(grid)
    if len(grid) < min_points:
        raise ValueError(f"{name} needs at least {min_points} points, got {len(grid)}")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError(f"{name} must be strictly increasing")
    return grid


def variance_sweep(
    inp: AttnInputs,
    hyperplanes: int,
    beta: float,
    l_grid,
    *,
    n_seeds: int = 20,
    base_seed: int = 0,
) -> ScalingExperiment:
    """RMS error vs table count at fixed (large) beta, with a log-log fit.

    Against the exact angular reference the expected slope is about -1/2:
    averaging independent tables is plain Monte-Carlo variance reduction.
    Seeds are paired across grid points.
    """
    l_grid = _check_grid(l_grid, "l_grid")
    if n_seeds < 2:
        raise ValueError("n_seeds must be >= 2")
    reference = angular_attention(inp, gamma=hyperplanes)

    means, stds = [], []
    for tables in l_grid:
        errs = []
        for s in range(n_seeds):
            cfg = SketchConfig(
                hyperplanes=hyperplanes, tables=int(tables), beta=beta, seed=base_seed + s
            )
            errs.append(output_rms_error(race_attention(inp, cfg).o, reference))
        errs = np.asarray(errs)
        means.append(errs.mean())
        stds.append(errs.std(ddof=1) / math.sqrt(n_seeds))
    slope, r2 = _loglog_fit(np.asarray(l_grid, float), np.asarray(means))
    return ScalingExperiment(
        name="variance_vs_tables",
        grid=np.asarray(l_grid, float),
        errors=np.asarray(means),
        std_errors=np.asarray(stds),
        seed_count=n_seeds,
        fit_slope=slope,
        fit_r2=r2,
    )


def bias_sweep(
    inp: AttnInputs,
    hyperplanes: int,
    tables: int,
    beta_grid,
    *,
    n_seeds: int = 8,
    base_seed: int = 0,
    check_monotone: bool = True,
) -> ScalingExperiment:
    """Seed-averaged RMS error vs temperature at fixed (large) table count.

    With enough tables the variance is negligible and the residual error is
    the smoothing bias, which must decrease strictly along an increasing beta
    grid. Raises ValueError if monotonicity fails (disable via
    ``check_monotone`` to inspect anyway). The log-log slope is reported
    (about -1 in the bias-dominated regime) but not asserted.
    """
    beta_grid = _check_grid(beta_grid, "beta_grid")
    if beta_grid[-1] / beta_grid[0] < 10.0:
        raise ValueError("beta_grid should span at least one decade")
    if n_seeds < 2:
        raise ValueError("n_seeds must be >= 2")
    reference = angular_attention(inp, gamma=hyperplanes)

    means, stds = [], []
    for beta in beta_grid:
        errs = []
        for s in range(n_seeds):
            cfg = SketchConfig(
                hyperplanes=hyperplanes, tables=tables, beta=float(beta), seed=base_seed + s
            )
            errs.append(output_rms_error(race_attention(inp, cfg).o, reference))
        errs = np.asarray(errs)
        means.append(errs.mean())
        stds.append(errs.std(ddof=1) / math.sqrt(n_seeds))

    if check_monotone:
        for i in range(1, len(means)):
            if not means[i] < means[i - 1]:
                raise ValueError(
                    "seed-averaged error is not strictly decreasing in beta: "
                    f"err({beta_grid[i - 1]}) = {means[i - 1]:.6g} <= "
                    f"err({beta_grid[i]}) = {means[i]:.6g}"
                )
    slope, r2 = _loglog_fit(np.asarray(beta_grid, float), np.asarray(means))
    return ScalingExperiment(
        name="bias_vs_beta",
        grid=np.asarray(beta_grid, float),
        errors=np.asarray(means),
        std_errors=np.asarray(stds),
        seed_count=n_seeds,
        fit_slope=slope,
        fit_r2=r2,
    )


def hard_race_attention(inp: AttnInputs, cfg: SketchConfig) -> RaceOutput:
    """The estimator with hard sign-hash buckets instead of soft assignments.

    Bias baseline for the soft-to-hard limit checks; non-causal only.
    """
    if cfg.causal:
        raise NotImplementedError("hard-bucket reference is non-causal only")
    from .core import DEGENERATE_DEN_EPS
    from .sketch import HashTable, hard_hash

    q, k = prepared_qk(inp, cfg)
    v = inp.v.astype(np.float64, copy=False)
    n, dv = inp.n, inp.dim_v
    num = np.zeros((n, dv), dtype=np.float64)
    den = np.zeros(n, dtype=np.float64)
    for m in range(cfg.ensembles):
        for l in range(cfg.tables):
            table = HashTable(gaussian_matrix(derive_table_rng(cfg.seed, m, l), cfg.hyperplanes, inp.dim))
            hq = hard_hash(q, table)
            hk = hard_hash(k, table)
            a = np.bincount(hk, minlength=cfg.n_buckets).astype(np.float64)
            b = np.zeros((cfg.n_buckets, dv), dtype=np.float64)
            np.add.at(b, hk, v)
            num += b[hq]
            den += a[hq]
    scale = 1.0 / cfg.total_tables
    num *= scale
    den *= scale
    deg = den <= DEGENERATE_DEN_EPS
    out = np.zeros_like(num)
    np.divide(num, den[:, None], out=out, where=~deg[:, None])
    return RaceOutput(o=out, den=den, degenerate_rows=tuple(np.nonzero(deg)[0].tolist()))


def kernel_deviation(q, k, cfg: SketchConfig, gamma: int) -> float:
    """Frobenius-norm deviation of the averaged sketch kernel from the exact one.

    Frobenius upper-bounds the spectral norm, so comparisons against spectral
    bounds remain sound. Requires gamma == cfg.hyperplanes (the regime the
    theory addresses) and small N.
    """
    if int(gamma) != cfg.hyperplanes:
        raise ValueError("kernel_deviation requires gamma == cfg.hyperplanes")
    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    if max(q.shape[0], k.shape[0]) > 1024:
        raise ValueError("kernel_deviation is limited to N <= 1024")
    s_hat = race_kernel(q, k, cfg)
    s_exact = angular_kernel_matrix(q, k, gamma)
    return float(np.linalg.norm(s_hat - s_exact, "fro"))


def kernel_variance_bound(n: int, tables: int, delta: float = DEFAULT_DELTA) -> float:
    """High-probability variance term of the kernel deviation bound."""
    return 4.0 * n / math.sqrt(tables) * math.sqrt(math.log(2.0 * n / delta))


@dataclass(frozen=True)
class CollisionCheckRow:
    angle: float
    p_hat: float
    p_exact: float
    std_err: float
    z_score: float
    passed: bool


@dataclass(frozen=True)
class CollisionReport:
    hyperplanes: int
    trials: int
    band: float
    rows: tuple[CollisionCheckRow, ...]

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.rows)


def collision_identity_check(
    hyperplanes: int,
    trials: int,
    rng: np.random.Generator,
    *,
    angles=COLLISION_ANGLES,
    dim: int = 8,
    band: float = 4.0,
) -> CollisionReport:
    """Monte-Carlo hard-hash collision rates against (1 - theta/pi)**p.

    For each fixed angle, draws ``trials`` independent hyperplane stacks and
    compares the all-bits-match rate with the analytic value; a row passes if
    the gap is within ``band`` binomial standard errors.
    """
    if trials < 10_000:
        raise ValueError("trials must be >= 10000")
    if hyperplanes < 1:
        raise ValueError("hyperplanes must be >= 1")
    rows = []
    for theta in angles:
        qv = np.zeros(dim)
        kv = np.zeros(dim)
        qv[0] = 1.0
        kv[0], kv[1] = math.cos(theta), math.sin(theta)
        w = rng.standard_normal((trials, hyperplanes, dim))
        zq = w @ qv
        zk = w @ kv
        collide = np.all((zq < 0) == (zk < 0), axis=1)
        p_hat = float(collide.mean())
        p_exact = (1.0 - theta / math.pi) ** hyperplanes
        std_err = math.sqrt(p_exact * (1.0 - p_exact) / trials)
        z = (p_hat - p_exact) / std_err if std_err > 0 else 0.0
        rows.append(
            CollisionCheckRow(
                angle=float(theta),
                p_hat=p_hat,
                p_exact=p_exact,
                std_err=std_err,
                z_score=z,
                passed=abs(p_hat - p_exact) <= band * std_err,
            )
        )
    return CollisionReport(
        hyperplanes=hyperplanes, trials=trials, band=band, rows=tuple(rows)
    )


@dataclass(frozen=True)
class RowSumReport:
    """Stability margins of the normalizing denominators on one instance."""

    n: int
    min_row_sum: float
    min_den: float
    ratio: float
    all_positive: bool
    near_degenerate: bool


def row_sum_stability(q, k, cfg: SketchConfig) -> RowSumReport:
    """Compare the exact kernel's row-sum floor to the sketched denominators.

    Near-degenerate instances (tiny exact row sums) are surfaced in the
    report, never raised: the theory assumes them away but the implementation
    must remain total. Denominator positivity is asserted, since soft
    assignments are strictly positive for finite beta.
    """
    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    s_exact = angular_kernel_matrix(q, k, cfg.hyperplanes)
    row_sums = s_exact.sum(axis=1)
    den = race_kernel(q, k, cfg).sum(axis=1)
    if np.any(den <= 0):
        raise RuntimeError("sketched denominators must be strictly positive")
    min_row_sum = float(row_sums.min())
    min_den = float(den.min())
    return RowSumReport(
        n=q.shape[0],
        min_row_sum=min_row_sum,
        min_den=min_den,
        ratio=min_den / min_row_sum if min_row_sum > 0 else float("inf"),
        all_positive=True,
        near_degenerate=min_row_sum < 0.01 * k.shape[0],
    )


# --- report serialization -------------------------------------------------

REPORT_COLUMNS = (
    "experiment",
    "grid_value",
    "seed_count",
    "mean_error",
    "std_error",
    "slope",
    "r2",
    "passed",
)


def experiment_rows(exp: ScalingExperiment, passed: bool) -> list[dict]:
    rows = []
    for i, g in enumerate(exp.grid):
        rows.append(
            {
                "experiment": exp.name,
                "grid_value": float(g),
                "seed_count": exp.seed_count,
                "mean_error": float(exp.errors[i]),
                "std_error": float(exp.std_errors[i]),
                "slope": exp.fit_slope,
                "r2": exp.fit_r2,
                "passed": passed,
            }
        )
    return rows


def collision_report_rows(report: CollisionReport) -> list[dict]:
    rows = []
    for r in report.rows:
        rows.append(
            {
                "experiment": f"collision_identity_p{report.hyperplanes}",
                "grid_value": r.angle,
                "seed_count": report.trials,
                "mean_error": abs(r.p_hat - r.p_exact),
                "std_error": r.std_err,
                "slope": "",
                "r2": "",
                "passed": r.passed,
            }
        )
    return rows


def write_report_csv(fileobj, rows: list[dict]) -> None:
    writer = csv.DictWriter(fileobj, fieldnames=list(REPORT_COLUMNS))
    writer.writeheader()
    for row in rows:
        writer.writerow({c: row.get(c, "") for c in REPORT_COLUMNS})


def report_csv_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    write_report_csv(buf, rows)
    return buf.getvalue()


def format_report_text(rows: list[dict]) -> str:
    lines = []
    for row in rows:
        status = "PASS" if row.get("passed") else "FAIL"
        slope = row.get("slope")
        extra = f" slope={slope:+.3f} r2={row['r2']:.3f}" if slope != "" else ""
        lines.append(
            f"[{status}] {row['experiment']}: grid={row['grid_value']:g} "
            f"mean_error={row['mean_error']:.6g} std_error={row['std_error']:.3g}"
            f" seeds={row['seed_count']}{extra}"
        )
    return "\n".join(lines)
