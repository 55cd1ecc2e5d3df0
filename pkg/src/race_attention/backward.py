"""Hand-derived reverse-mode gradients of the sketched attention forward map.

The vector-Jacobian product covers the full chain: optional row normalization
of queries/keys, tanh projections, softmax over corners, bucket aggregation,
table averaging, and the final numerator/denominator ratio. Hyperplanes are
frozen constants. Feature matrices are recomputed rather than stored, keeping
backward memory at the forward footprint.

Causal mode mirrors the forward prefix scan with a reverse suffix scan over
the cotangents of the cumulative bucket statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    DEGENERATE_DEN_EPS,
    SketchConfig,
    as_matrix,
    row_normalize_vjp,
)
from .exact import AttnInputs
from .forward import (
    accumulate_num_den,
    map_tables_ordered,
    prepared_qk,
    race_attention,
    table_hyperplanes,
)
from .sketch import EXPLICIT_CORNER_LIMIT, HashTable, _sigmoid, corner_matrix, soft_features

# finite_diff_check flags this regime instead of judging it: near-hard
# assignments make central differences unreliable.
HIGH_CURVATURE_BETA = 64.0
FD_TOLERANCE = 1e-4
FD_MAX_ROWS = 64
# Probe cotangent scale. Central-difference roundoff is proportional to the
# loss magnitude; keeping probes small keeps that noise below the 1e-8
# relative-error floor on near-zero gradient components.
FD_PROBE_SCALE = 1e-3


@dataclass(frozen=True)
class RaceGradients:
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray


def _soft_features_vjp(x, table: HashTable, beta: float, d_phi: np.ndarray) -> np.ndarray:
    """Cotangent on soft_features(x) pulled back to x. Recomputes the forward."""
    w = table.w.astype(x.dtype, copy=False)
    u = np.tanh(x @ w.T)
    if table.n_bits <= EXPLICIT_CORNER_LIMIT:
        corners = corner_matrix(table.n_bits).astype(x.dtype, copy=False)
        logits = beta * (u @ corners.T)
        logits -= logits.max(axis=1, keepdims=True)
        phi = np.exp(logits)
        phi /= phi.sum(axis=1, keepdims=True)
        d_logits = phi * (d_phi - np.sum(d_phi * phi, axis=1, keepdims=True))
        d_u = beta * (d_logits @ corners)
    else:
        # factored construction: rebuild the per-bit stages, then reverse them
        z = 2.0 * beta * u
        p_pos = _sigmoid(z)
        p_neg = _sigmoid(-z)
        stages = [np.ones((x.shape[0], 1), dtype=x.dtype)]
        for t in range(table.n_bits):
            stages.append(
                np.concatenate(
                    [stages[-1] * p_pos[:, t : t + 1], stages[-1] * p_neg[:, t : t + 1]],
                    axis=1,
                )
            )
        d_stage = d_phi
        d_u = np.empty_like(u)
        for t in reversed(range(table.n_bits)):
            half = 1 << t
            prev = stages[t]
            d_pos_blk = d_stage[:, :half]
            d_neg_blk = d_stage[:, half:]
            d_ppos = np.sum(d_pos_blk * prev, axis=1)
            d_pneg = np.sum(d_neg_blk * prev, axis=1)
            d_stage = d_pos_blk * p_pos[:, t : t + 1] + d_neg_blk * p_neg[:, t : t + 1]
            d_u[:, t] = 2.0 * beta * p_pos[:, t] * p_neg[:, t] * (d_ppos - d_pneg)
    d_proj = d_u * (1.0 - u * u)
    return d_proj @ w


def _table_grads_noncausal(q, k, v, w, cfg: SketchConfig, dn, dd):
    table = HashTable(w)
    n, dv = q.shape[0], v.shape[1]
    n_b = cfg.n_buckets
    bs = cfg.block_size
    dtype = q.dtype

    a = np.zeros(n_b, dtype=np.float64)
    b = np.zeros((n_b, dv), dtype=np.float64)
    for s in range(0, n, bs):
        phi_kb = soft_features(k[s : s + bs], table, cfg.beta)
        a += phi_kb.sum(axis=0, dtype=np.float64)
        b += phi_kb.T @ v[s : s + bs]
    a_c = a.astype(dtype, copy=False)
    b_c = b.astype(dtype, copy=False)

    dq = np.empty_like(q)
    d_a = np.zeros(n_b, dtype=np.float64)
    d_b = np.zeros((n_b, dv), dtype=np.float64)
    for s in range(0, n, bs):
        phi_qb = soft_features(q[s : s + bs], table, cfg.beta)
        dn_blk, dd_blk = dn[s : s + bs], dd[s : s + bs]
        d_phi_q = dn_blk @ b_c.T + dd_blk[:, None] * a_c[None, :]
        dq[s : s + bs] = _soft_features_vjp(q[s : s + bs], table, cfg.beta, d_phi_q)
        d_b += phi_qb.T @ dn_blk
        d_a += phi_qb.T @ dd_blk

    d_a_c = d_a.astype(dtype, copy=False)
    d_b_c = d_b.astype(dtype, copy=False)
    dk = np.empty_like(k)
    dvv = np.empty_like(v)
    for s in range(0, n, bs):
        phi_kb = soft_features(k[s : s + bs], table, cfg.beta)
        d_phi_k = v[s : s + bs] @ d_b_c.T + d_a_c[None, :]
        dk[s : s + bs] = _soft_features_vjp(k[s : s + bs], table, cfg.beta, d_phi_k)
        dvv[s : s + bs] = phi_kb @ d_b_c
    return dq, dk, dvv


def _table_grads_causal(q, k, v, w, cfg: SketchConfig, dn, dd):
    table = HashTable(w)
    n, dv = q.shape[0], v.shape[1]
    n_b = cfg.n_buckets
    bs = cfg.block_size

    bounds = [(s, min(s + bs, n)) for s in range(0, n, bs)]
    carries = []
    a_carry = np.zeros(n_b, dtype=np.float64)
    b_carry = np.zeros((n_b, dv), dtype=np.float64)
    for s, e in bounds:
        carries.append((a_carry.copy(), b_carry.copy()))
        phi_k = soft_features(k[s:e], table, cfg.beta).astype(np.float64, copy=False)
        v_blk = v[s:e].astype(np.float64, copy=False)
        a_carry = a_carry + phi_k.sum(axis=0)
        b_carry = b_carry + phi_k.T @ v_blk

    dq = np.empty_like(q)
    dk = np.empty_like(k)
    dvv = np.empty_like(v)
    suf_a = np.zeros(n_b, dtype=np.float64)
    suf_b = np.zeros((n_b, dv), dtype=np.float64)
    for idx in reversed(range(len(bounds))):
        s, e = bounds[idx]
        a_in, b_in = carries[idx]
        phi_k = soft_features(k[s:e], table, cfg.beta).astype(np.float64, copy=False)
        phi_q = soft_features(q[s:e], table, cfg.beta).astype(np.float64, copy=False)
        v_blk = v[s:e].astype(np.float64, copy=False)
        dn_blk, dd_blk = dn[s:e], dd[s:e]

        cum_a = a_in + np.cumsum(phi_k, axis=0)
        cum_b = b_in + np.cumsum(phi_k[:, :, None] * v_blk[:, None, :], axis=0)
        d_phi_q = np.einsum("td,trd->tr", dn_blk, cum_b) + dd_blk[:, None] * cum_a
        dq[s:e] = _soft_features_vjp(
            q[s:e], table, cfg.beta, d_phi_q.astype(q.dtype, copy=False)
        )

        d_cum_a = phi_q * dd_blk[:, None]
        d_cum_b = phi_q[:, :, None] * dn_blk[:, None, :]
        sa = np.cumsum(d_cum_a[::-1], axis=0)[::-1] + suf_a
        sb = np.cumsum(d_cum_b[::-1], axis=0)[::-1] + suf_b
        d_phi_k = sa + np.einsum("trd,td->tr", sb, v_blk)
        dk[s:e] = _soft_features_vjp(
            k[s:e], table, cfg.beta, d_phi_k.astype(k.dtype, copy=False)
        )
        dvv[s:e] = np.einsum("tr,trd->td", phi_k, sb).astype(v.dtype, copy=False)

        suf_a += d_cum_a.sum(axis=0)
        suf_b += d_cum_b.sum(axis=0)
    return dq, dk, dvv


def race_attention_vjp(
    inp: AttnInputs, cfg: SketchConfig, d_out, workers: int = 1
) -> RaceGradients:
    """Gradients (dQ, dK, dV) of the forward map against cotangent ``d_out``.

    Rows flagged degenerate by the forward contribute nothing. Results are
    deterministic and worker-count invariant, like the forward pass.
    """
    d_out = as_matrix(d_out, "d_out", dtype=inp.q.dtype)
    if d_out.shape != (inp.n, inp.dim_v):
        raise ValueError(
            f"d_out shape {d_out.shape} does not match output shape {(inp.n, inp.dim_v)}"
        )

    q, k = prepared_qk(inp, cfg)
    v = inp.v
    num, den = accumulate_num_den(q, k, v, cfg, workers)
    live = den > DEGENERATE_DEN_EPS
    safe_den = np.where(live, den, 1.0)
    out = np.where(live[:, None], num / safe_den[:, None], 0.0)

    d_num = np.where(live[:, None], d_out / safe_den[:, None], 0.0)
    d_den = np.where(live, -np.sum(d_out * out, axis=1) / safe_den, 0.0)
    scale = 1.0 / cfg.total_tables
    dn = (d_num * scale).astype(q.dtype, copy=False)
    dd = (d_den * scale).astype(q.dtype, copy=False)

    dim = q.shape[1]
    tasks = [(m, l) for m in range(cfg.ensembles) for l in range(cfg.tables)]
    grads_fn = _table_grads_causal if cfg.causal else _table_grads_noncausal

    def one(ml):
        m, l = ml
        w = table_hyperplanes(cfg, dim, m, l).astype(q.dtype, copy=False)
        return grads_fn(q, k, v, w, cfg, dn, dd)

    dq = np.zeros(q.shape, dtype=np.float64)
    dk = np.zeros(k.shape, dtype=np.float64)
    dv = np.zeros(v.shape, dtype=np.float64)
    for t_dq, t_dk, t_dv in map_tables_ordered(one, tasks, workers):
        dq += t_dq
        dk += t_dk
        dv += t_dv

    if cfg.normalize_inputs:
        dq = row_normalize_vjp(inp.q.astype(np.float64, copy=False), dq)
        dk = row_normalize_vjp(inp.k.astype(np.float64, copy=False), dk)
    return RaceGradients(
        dq=dq.astype(inp.q.dtype, copy=False),
        dk=dk.astype(inp.k.dtype, copy=False),
        dv=dv.astype(inp.v.dtype, copy=False),
    )


@dataclass(frozen=True)
class FiniteDiffReport:
    """Outcome of comparing VJP gradients against central differences."""

    max_rel_error: float
    rel_error_q: float
    rel_error_k: float
    rel_error_v: float
    probes: int
    h: float
    beta: float
    tolerance: float
    within_tolerance: bool
    high_curvature: bool


def finite_diff_check(
    inp: AttnInputs, cfg: SketchConfig, probes: int = 2, h: float = 1e-5
) -> FiniteDiffReport:
    """Probe random scalar losses and compare VJP gradients to central differences.

    Relative errors use denominator max(|analytic|, |numeric|, 1e-8). In the
    near-hard regime (large beta) differences degrade on principle, so the
    report flags high curvature instead of judging the result there.
    """
    if inp.n > FD_MAX_ROWS:
        raise ValueError(f"finite_diff_check is limited to N <= {FD_MAX_ROWS}")
    if not (1e-7 <= h <= 1e-3):
        raise ValueError("h must lie in [1e-7, 1e-3]")
    if probes < 1:
        raise ValueError("probes must be >= 1")

    rng = np.random.default_rng(
        np.random.SeedSequence(int(cfg.seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(0xFD,))
    )
    worst = {"q": 0.0, "k": 0.0, "v": 0.0}

    def loss(q, k, v, d_out):
        res = race_attention(AttnInputs(q, k, v), cfg)
        return float(np.sum(d_out * res.o))

    for _ in range(probes):
        d_out = FD_PROBE_SCALE * rng.standard_normal((inp.n, inp.dim_v))
        grads = race_attention_vjp(inp, cfg, d_out)
        for name, base, grad in (
            ("q", inp.q, grads.dq),
            ("k", inp.k, grads.dk),
            ("v", inp.v, grads.dv),
        ):
            arrays = {"q": inp.q.copy(), "k": inp.k.copy(), "v": inp.v.copy()}
            for idx in np.ndindex(base.shape):
                orig = arrays[name][idx]
                arrays[name][idx] = orig + h
                up = loss(arrays["q"], arrays["k"], arrays["v"], d_out)
                arrays[name][idx] = orig - h
                down = loss(arrays["q"], arrays["k"], arrays["v"], d_out)
                arrays[name][idx] = orig
                numeric = (up - down) / (2.0 * h)
                analytic = float(grad[idx])
                rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
                worst[name] = max(worst[name], rel)

    max_rel = max(worst.values())
    return FiniteDiffReport(
        max_rel_error=max_rel,
        rel_error_q=worst["q"],
        rel_error_k=worst["k"],
        rel_error_v=worst["v"],
        probes=probes,
        h=h,
        beta=cfg.beta,
        tolerance=FD_TOLERANCE,
        within_tolerance=max_rel <= FD_TOLERANCE,
        high_curvature=cfg.beta > HIGH_CURVATURE_BETA,
    )
