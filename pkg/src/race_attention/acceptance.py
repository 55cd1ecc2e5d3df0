"""Acceptance checks: one callable per criterion, shared by tests and the CLI.

Each check returns an AcceptanceResult with a pass flag and a short human
readable summary. Tolerances are fixed here, not configurable: they are the
contract. ``quick=True`` trims instance counts for a fast smoke run; the
full settings are what the test suite asserts.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass

import numpy as np

from .backward import finite_diff_check, race_attention_vjp
from .bench import BenchMethod, bench_scaling, median_time
from .core import SketchConfig
from .exact import AttnInputs
from .forward import race_attention
from .oracle import race_attention_oracle
from .sketch import HashTable, make_hash_table, soft_features, bucket_stats
from .theory import (
    bias_sweep,
    collision_identity_check,
    collision_report_rows,
    experiment_rows,
    hard_race_attention,
    output_rms_error,
    variance_sweep,
)
from .exact import angular_attention

ORACLE_TOL = 1e-10
PREFIX_TOL = 1e-10
SLOPE_BAND = (-0.65, -0.35)
SLOPE_R2_MIN = 0.9
SOFT_HARD_TOL = 1e-3
GRAD_TOL = 1e-4
RACE_RATIO_BAND = (1.6, 2.6)
EXACT_RATIO_BAND = (3.0, 5.5)


@dataclass(frozen=True)
class AcceptanceResult:
    criterion: int
    name: str
    passed: bool
    details: str
    seconds: float
    report_rows: tuple = ()

    def summary_row(self) -> dict:
        return {
            "experiment": f"criterion_{self.criterion}",
            "grid_value": "",
            "seed_count": "",
            "mean_error": "",
            "std_error": "",
            "slope": "",
            "r2": "",
            "passed": self.passed,
        }


def _timed(criterion, name, fn):
    t0 = time.perf_counter()
    rows: tuple = ()
    try:
        out = fn()
        if len(out) == 3:
            passed, details, rows = out
        else:
            passed, details = out
    except Exception as exc:  # a crashed suite is a failed suite
        passed, details = False, f"raised {type(exc).__name__}: {exc}"
    return AcceptanceResult(
        criterion=criterion,
        name=name,
        passed=passed,
        details=details,
        seconds=time.perf_counter() - t0,
        report_rows=tuple(rows),
    )


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(b))), 1e-30)
    return float(np.max(np.abs(a - b))) / scale


def _random_inputs(rng, n, d, dv, dtype=np.float64):
    q = rng.standard_normal((n, d)).astype(dtype)
    k = rng.standard_normal((n, d)).astype(dtype)
    v = rng.standard_normal((n, dv)).astype(dtype)
    return AttnInputs(q, k, v)


def _unit_inputs(rng, n, d, dv):
    inp = _random_inputs(rng, n, d, dv)
    q = inp.q / np.linalg.norm(inp.q, axis=1, keepdims=True)
    k = inp.k / np.linalg.norm(inp.k, axis=1, keepdims=True)
    return AttnInputs(q, k, inp.v)


def oracle_instances(quick: bool = False):
    """Deterministic instance list spanning the required parameter grid."""
    p_vals, l_vals, m_vals = (1, 2, 3), (1, 2, 4), (1, 2)
    n_vals, d_vals, beta_vals = (1, 2, 17, 64), (1, 4, 16), (2.0, 8.0, 16.0)
    combos = [(p, l, m) for p in p_vals for l in l_vals for m in m_vals]
    instances = []
    idx = 0
    for rep in range(3):
        for p, l, m in combos:
            instances.append(
                dict(
                    hyperplanes=p,
                    tables=l,
                    ensembles=m,
                    n=n_vals[idx % 4],
                    d=d_vals[idx % 3],
                    dv=d_vals[(idx + rep) % 3],
                    beta=beta_vals[idx % 3],
                    causal=idx % 3 == 1,
                    seed=1000 + idx,
                )
            )
            idx += 1
    if quick:
        instances = instances[::3]
    return instances


def check_oracle_equivalence(quick: bool = False) -> AcceptanceResult:
    def run():
        worst = 0.0
        instances = oracle_instances(quick)
        for spec in instances:
            rng = np.random.default_rng(spec["seed"])
            inp = _random_inputs(rng, spec["n"], spec["d"], spec["dv"])
            cfg = SketchConfig(
                hyperplanes=spec["hyperplanes"],
                tables=spec["tables"],
                ensembles=spec["ensembles"],
                beta=spec["beta"],
                seed=spec["seed"],
                causal=spec["causal"],
            )
            fast = race_attention(inp, cfg)
            slow = race_attention_oracle(inp, cfg)
            if fast.degenerate_rows != slow.degenerate_rows:
                return False, f"degenerate flags differ on instance {spec}"
            err = max(
                _rel_err(fast.o, slow.o),
                _rel_err(fast.den[:, None], slow.den[:, None]),
            )
            worst = max(worst, err)
            if err > ORACLE_TOL:
                return False, f"rel err {err:.3e} > {ORACLE_TOL} on instance {spec}"
        return True, f"{len(instances)} instances, worst rel err {worst:.3e}"

    return _timed(1, "oracle equivalence (vectorized vs scalar)", run)


def check_prefix_consistency(quick: bool = False) -> AcceptanceResult:
    def run():
        rng = np.random.default_rng(7)
        n_instances = 6 if quick else 20
        worst = 0.0
        for i in range(n_instances):
            n = int(rng.integers(3, 65))
            d = int(rng.integers(2, 9))
            dv = int(rng.integers(1, 7))
            inp = _random_inputs(rng, n, d, dv)
            cfg = SketchConfig(
                hyperplanes=int(rng.integers(1, 4)),
                tables=int(rng.integers(1, 4)),
                ensembles=int(rng.integers(1, 3)),
                beta=float(rng.choice([2.0, 8.0, 16.0])),
                seed=500 + i,
                causal=True,
            )
            causal_out = race_attention(inp, cfg).o
            flat_cfg = dataclasses.replace(cfg, causal=False)
            for t in range(1, n + 1):
                prefix = AttnInputs(inp.q[:t], inp.k[:t], inp.v[:t])
                ref = race_attention(prefix, flat_cfg).o[t - 1]
                err = _rel_err(causal_out[t - 1], ref)
                worst = max(worst, err)
                if err > PREFIX_TOL:
                    return False, f"row {t - 1} of instance {i}: rel err {err:.3e}"
        return True, f"{n_instances} instances, all prefixes, worst rel err {worst:.3e}"

    return _timed(2, "causal prefix consistency", run)


def check_collision_identity(quick: bool = False) -> AcceptanceResult:
    def run():
        trials = 10_000 if quick else 100_000
        rows, lines = [], []
        all_ok = True
        for p in (1, 2, 3):
            rng = np.random.default_rng(
                np.random.SeedSequence(2024, spawn_key=(p,))
            )
            report = collision_identity_check(p, trials, rng)
            rows.extend(collision_report_rows(report))
            for row in report.rows:
                if not row.passed:
                    all_ok = False
                    lines.append(
                        f"p={p} theta={row.angle:.3f}: hat={row.p_hat:.5f} "
                        f"exact={row.p_exact:.5f} z={row.z_score:+.2f}"
                    )
        if not all_ok:
            return False, "; ".join(lines), rows
        return True, f"{trials} trials x 4 angles x p in {{1,2,3}}, all within 4 SE", rows

    return _timed(3, "hard-hash collision identity", run)


def check_variance_scaling(quick: bool = False) -> AcceptanceResult:
    def run():
        rng = np.random.default_rng(11)
        inp = _unit_inputs(rng, 128, 16, 16)
        exp = variance_sweep(
            inp,
            hyperplanes=2,
            beta=256.0,
            l_grid=[4, 16, 64, 256],
            n_seeds=8 if quick else 20,
            base_seed=100,
        )
        ok = SLOPE_BAND[0] <= exp.fit_slope <= SLOPE_BAND[1] and exp.fit_r2 >= SLOPE_R2_MIN
        return ok, (
            f"slope={exp.fit_slope:+.3f} (band {SLOPE_BAND}), r2={exp.fit_r2:.4f} "
            f"(min {SLOPE_R2_MIN}), errors={np.array2string(exp.errors, precision=4)}"
        ), experiment_rows(exp, ok)

    return _timed(4, "variance scaling vs table count", run)


def check_bias_monotonicity(quick: bool = False) -> AcceptanceResult:
    def run():
        rng = np.random.default_rng(13)
        inp = _unit_inputs(rng, 64, 16, 16)
        tables = 512 if quick else 2048
        n_seeds = 4 if quick else 8

        exp = bias_sweep(
            inp,
            hyperplanes=2,
            tables=tables,
            beta_grid=[2, 4, 8, 16, 32],
            n_seeds=n_seeds,
            base_seed=300,
            check_monotone=False,
        )
        decreasing = bool(np.all(np.diff(exp.errors) < 0))

        reference = angular_attention(inp, gamma=2)
        soft_errs, hard_errs = [], []
        for s in range(2 if quick else 4):
            cfg = SketchConfig(hyperplanes=2, tables=tables, beta=1e3, seed=400 + s)
            soft_errs.append(output_rms_error(race_attention(inp, cfg).o, reference))
            hard_errs.append(output_rms_error(hard_race_attention(inp, cfg).o, reference))
        gap = abs(float(np.mean(soft_errs)) - float(np.mean(hard_errs)))

        ok = decreasing and gap <= SOFT_HARD_TOL
        return ok, (
            f"errors over beta grid: {np.array2string(exp.errors, precision=5)} "
            f"(strictly decreasing: {decreasing}); soft-vs-hard error gap at "
            f"beta=1e3: {gap:.2e} (tol {SOFT_HARD_TOL})"
        ), experiment_rows(exp, ok)

    return _timed(5, "bias decreases in beta; soft matches hard at large beta", run)


def gradcheck_instances(quick: bool = False):
    base = []
    betas = (2.0, 4.0, 8.0, 16.0)
    for i in range(4 if quick else 10):
        base.append(
            dict(
                n=12,
                d=4,
                dv=3 if i % 2 else 4,
                hyperplanes=1 + i % 3,
                tables=1 + i % 2,
                ensembles=1 + (i // 2) % 2,
                beta=betas[i % 4],
                seed=900 + i,
            )
        )
    return base


def check_gradients(quick: bool = False) -> AcceptanceResult:
    def run():
        worst = 0.0
        count = 0
        for spec in gradcheck_instances(quick):
            rng = np.random.default_rng(spec["seed"])
            inp = _random_inputs(rng, spec["n"], spec["d"], spec["dv"])
            for causal in (False, True):
                cfg = SketchConfig(
                    hyperplanes=spec["hyperplanes"],
                    tables=spec["tables"],
                    ensembles=spec["ensembles"],
                    beta=spec["beta"],
                    seed=spec["seed"],
                    causal=causal,
                )
                report = finite_diff_check(inp, cfg, probes=1, h=1e-5)
                worst = max(worst, report.max_rel_error)
                count += 1
                if not report.within_tolerance:
                    return False, (
                        f"max rel err {report.max_rel_error:.3e} > {GRAD_TOL} "
                        f"(causal={causal}, {spec})"
                    )
        return True, f"{count} checks (causal and non-causal), worst rel err {worst:.3e}"

    return _timed(6, "gradients match central finite differences", run)


def check_runtime_scaling(quick: bool = False) -> AcceptanceResult:
    def run():
        repeats = 3
        race_lengths = [2**14, 2**15] if quick else [2**17, 2**18, 2**19]
        exact_lengths = [2**10, 2**11] if quick else [2**12, 2**13]
        race_spec = BenchMethod(
            method="race", sketch=SketchConfig(hyperplanes=2, tables=2, seed=5)
        )
        exact_spec = BenchMethod(method="softmax_exact")

        records = bench_scaling(
            race_lengths,
            [race_spec],
            repeats=repeats,
            time_budget_s=600.0,
            dim=128,
            heads=4,
            dtype=np.float32,
            pass_kind="forward_backward",
            seed=5,
        )
        records += bench_scaling(
            exact_lengths,
            [exact_spec],
            repeats=repeats,
            time_budget_s=600.0,
            dim=128,
            heads=4,
            dtype=np.float32,
            pass_kind="forward_backward",
            seed=5,
        )

        msgs, ok = [], True
        for a, b in zip(race_lengths, race_lengths[1:]):
            ratio = median_time(records, "race", b) / median_time(records, "race", a)
            in_band = RACE_RATIO_BAND[0] <= ratio <= RACE_RATIO_BAND[1]
            ok &= in_band
            msgs.append(f"race T({b})/T({a})={ratio:.2f}")
        for a, b in zip(exact_lengths, exact_lengths[1:]):
            ratio = median_time(records, "softmax_exact", b) / median_time(
                records, "softmax_exact", a
            )
            in_band = EXACT_RATIO_BAND[0] <= ratio <= EXACT_RATIO_BAND[1]
            ok &= in_band
            msgs.append(f"softmax T({b})/T({a})={ratio:.2f}")
        return ok, (
            "; ".join(msgs)
            + f" (race band {RACE_RATIO_BAND}, exact band {EXACT_RATIO_BAND})"
        )

    return _timed(7, "wall-clock linearity / quadratic contrast", run)


def check_conservation(quick: bool = False) -> AcceptanceResult:
    def run():
        rng = np.random.default_rng(17)
        n_cases = 30 if quick else 100
        for i in range(n_cases):
            n = int(rng.integers(1, 65))
            d = int(rng.integers(1, 17))
            dv = int(rng.integers(1, 17))
            p = int(rng.integers(1, 4))
            beta = float(rng.choice([0.5, 2.0, 8.0, 64.0]))
            table = make_hash_table(np.random.default_rng(3000 + i), p, d)
            x = rng.standard_normal((n, d))
            v = rng.standard_normal((n, dv))

            phi = soft_features(x, table, beta)
            row_sums = phi.sum(axis=1)
            if np.max(np.abs(row_sums - 1.0)) > 1e-10:
                return False, f"feature row sums off by {np.max(np.abs(row_sums - 1)):.2e}"
            stats = bucket_stats(phi, v)
            if abs(stats.a.sum() - n) > 1e-8:
                return False, f"bucket mass {stats.a.sum()} != {n}"
            col_gap = np.max(np.abs(stats.b.sum(axis=0) - v.sum(axis=0)))
            if col_gap > 1e-8:
                return False, f"value-sum columns off by {col_gap:.2e}"

            const = rng.standard_normal(dv)
            inp = AttnInputs(x, rng.standard_normal((n, d)), np.tile(const, (n, 1)))
            cfg = SketchConfig(hyperplanes=p, tables=2, beta=beta, seed=600 + i)
            out = race_attention(inp, cfg).o
            if np.max(np.abs(out - const)) > 1e-10:
                return False, f"constant-value output off by {np.max(np.abs(out - const)):.2e}"
        return True, f"{n_cases} random instances conserve mass and value sums"

    return _timed(8, "conservation invariants", run)


def check_determinism(quick: bool = False) -> AcceptanceResult:
    def run():
        rng = np.random.default_rng(19)
        for causal in (False, True):
            inp = _random_inputs(rng, 33, 6, 5)
            cfg = SketchConfig(
                hyperplanes=2, tables=3, ensembles=2, beta=8.0, seed=777, causal=causal
            )
            first = race_attention(inp, cfg)
            second = race_attention(inp, cfg)
            if not (
                np.array_equal(first.o, second.o)
                and np.array_equal(first.den, second.den)
            ):
                return False, f"repeated call differs (causal={causal})"
            wide = race_attention(inp, cfg, workers=4)
            if not (
                np.array_equal(first.o, wide.o) and np.array_equal(first.den, wide.den)
            ):
                return False, f"workers=4 forward differs (causal={causal})"
            d_out = rng.standard_normal((inp.n, inp.dim_v))
            g1 = race_attention_vjp(inp, cfg, d_out)
            g4 = race_attention_vjp(inp, cfg, d_out, workers=4)
            if not (
                np.array_equal(g1.dq, g4.dq)
                and np.array_equal(g1.dk, g4.dk)
                and np.array_equal(g1.dv, g4.dv)
            ):
                return False, f"workers=4 backward differs (causal={causal})"
        return True, "bit-identical across repeats and worker counts {1, 4}"

    return _timed(9, "determinism and worker invariance", run)


VALIDATE_CHECKS = (
    check_oracle_equivalence,
    check_prefix_consistency,
    check_collision_identity,
    check_variance_scaling,
    check_bias_monotonicity,
    check_gradients,
    check_conservation,
    check_determinism,
)


def run_validation(quick: bool = False) -> list[AcceptanceResult]:
    """All acceptance checks except the wall-clock benchmark (criterion 7)."""
    return [check(quick) for check in VALIDATE_CHECKS]


def run_all(quick: bool = False) -> list[AcceptanceResult]:
    results = run_validation(quick)
    results.append(check_runtime_scaling(quick))
    return sorted(results, key=lambda r: r.criterion)


def format_results(results) -> str:
    lines = []
    for r in results:
        mark = "PASS" if r.passed else "FAIL"
        lines.append(
            f"[{mark}] criterion {r.criterion}: {r.name} ({r.seconds:.1f}s) - {r.details}"
        )
    return "\n".join(lines)


def collect_report_rows(results) -> list[dict]:
    """Flatten results into the tabular report schema (one summary row per
    check plus any per-grid-point rows the check produced)."""
    rows = []
    for r in results:
        rows.append(r.summary_row())
        rows.extend(r.report_rows)
    return rows
