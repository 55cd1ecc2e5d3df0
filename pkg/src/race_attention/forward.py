"""Sketched attention forward pass.

Non-causal: per table, keys are aggregated into soft bucket statistics and
each query mixes them; numerators and denominators are averaged over all
ensemble/table pairs and divided row-wise at the end.

Causal: a single left-to-right scan per table maintains cumulative bucket
statistics so position t sees keys 1..t only. The scan runs over row chunks
with float64 accumulators regardless of input dtype.

Tables are independent; with ``workers > 1`` they run on a thread pool, but
results are always reduced in (ensemble, table) index order so outputs are
bit-identical for any worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import (
    DEGENERATE_DEN_EPS,
    SketchConfig,
    derive_table_rng,
    gaussian_matrix,
    row_normalize,
)
from .exact import AttnInputs
from .sketch import EXPLICIT_CORNER_LIMIT, HashTable, corner_matrix, soft_features

# race_kernel materializes an N x N matrix; it exists for theory validation
# only and refuses to run past this size.
KERNEL_MAX_ROWS = 2048


@dataclass(frozen=True)
class RaceOutput:
    """Estimator output, averaged denominators, and degenerate-row flags."""

    o: np.ndarray
    den: np.ndarray
    degenerate_rows: tuple[int, ...]


def prepared_qk(inp: AttnInputs, cfg: SketchConfig) -> tuple[np.ndarray, np.ndarray]:
    """Query/key matrices after the configured normalization policy."""
    if cfg.normalize_inputs:
        return row_normalize(inp.q), row_normalize(inp.k)
    return inp.q, inp.k


def table_hyperplanes(cfg: SketchConfig, dim: int, ensemble: int, table: int) -> np.ndarray:
    """Gaussian hyperplanes for one (ensemble, table) slot, float64."""
    rng = derive_table_rng(cfg.seed, ensemble, table)
    return gaussian_matrix(rng, cfg.hyperplanes, dim)


def map_tables_ordered(fn, tasks, workers: int):
    """Apply ``fn`` over tasks, yielding results in task order.

    With workers > 1, tasks run on a thread pool in slices of ``workers`` so
    at most that many results are in flight; order of consumption is fixed.
    """
    if workers <= 1:
        for t in tasks:
            yield fn(t)
        return
    with ThreadPoolExecutor(max_workers=workers) as ex:
        for start in range(0, len(tasks), workers):
            futures = [ex.submit(fn, t) for t in tasks[start : start + workers]]
            for fut in futures:
                yield fut.result()


def _table_num_den_noncausal(q, k, v, w, cfg: SketchConfig):
    n, dv = q.shape[0], v.shape[1]
    table = HashTable(w)
    bs = cfg.block_size

    a = np.zeros(cfg.n_buckets, dtype=np.float64)
    b = np.zeros((cfg.n_buckets, dv), dtype=np.float64)
    for s in range(0, n, bs):
        phi_kb = soft_features(k[s : s + bs], table, cfg.beta)
        a += phi_kb.sum(axis=0, dtype=np.float64)
        b += phi_kb.T @ v[s : s + bs]

    a_c = a.astype(q.dtype, copy=False)
    b_c = b.astype(q.dtype, copy=False)
    num = np.empty((n, dv), dtype=np.float64)
    den = np.empty(n, dtype=np.float64)
    for s in range(0, n, bs):
        phi_qb = soft_features(q[s : s + bs], table, cfg.beta)
        num[s : s + bs] = phi_qb @ b_c
        den[s : s + bs] = phi_qb @ a_c
    return num, den


def _table_num_den_causal(q, k, v, w, cfg: SketchConfig):
    n, dv = q.shape[0], v.shape[1]
    table = HashTable(w)
    bs = cfg.block_size

    a_carry = np.zeros(cfg.n_buckets, dtype=np.float64)
    b_carry = np.zeros((cfg.n_buckets, dv), dtype=np.float64)
    num = np.empty((n, dv), dtype=np.float64)
    den = np.empty(n, dtype=np.float64)
    for s in range(0, n, bs):
        e = min(s + bs, n)
        phi_k = soft_features(k[s:e], table, cfg.beta).astype(np.float64, copy=False)
        phi_q = soft_features(q[s:e], table, cfg.beta).astype(np.float64, copy=False)
        v_blk = v[s:e].astype(np.float64, copy=False)

        cum_a = a_carry + np.cumsum(phi_k, axis=0)
        cum_b = b_carry + np.cumsum(phi_k[:, :, None] * v_blk[:, None, :], axis=0)
        num[s:e] = np.einsum("tr,trd->td", phi_q, cum_b)
        den[s:e] = np.einsum("tr,tr->t", phi_q, cum_a)
        a_carry = cum_a[-1]
        b_carry = cum_b[-1]
    return num, den


def accumulate_num_den(q, k, v, cfg: SketchConfig, workers: int = 1):
    """Averaged numerator/denominator over all ensemble-table slots (float64)."""
    n, dv = q.shape[0], v.shape[1]
    dim = q.shape[1]
    tasks = [(m, l) for m in range(cfg.ensembles) for l in range(cfg.tables)]
    table_fn = _table_num_den_causal if cfg.causal else _table_num_den_noncausal

    def one(ml):
        m, l = ml
        w = table_hyperplanes(cfg, dim, m, l).astype(q.dtype, copy=False)
        return table_fn(q, k, v, w, cfg)

    num = np.zeros((n, dv), dtype=np.float64)
    den = np.zeros(n, dtype=np.float64)
    for t_num, t_den in map_tables_ordered(one, tasks, workers):
        num += t_num
        den += t_den
    scale = 1.0 / cfg.total_tables
    num *= scale
    den *= scale
    return num, den


def race_attention(inp: AttnInputs, cfg: SketchConfig, workers: int = 1) -> RaceOutput:
    """Sketched attention estimate O = Num / Den.

    Deterministic given ``cfg.seed``; identical results for any ``workers``.
    Rows whose averaged denominator falls at or below the degeneracy floor
    are zeroed and flagged instead of producing NaN.
    """
    q, k = prepared_qk(inp, cfg)
    num, den = accumulate_num_den(q, k, inp.v, cfg, workers)

    deg = den <= DEGENERATE_DEN_EPS
    out = np.zeros_like(num)
    np.divide(num, den[:, None], out=out, where=~deg[:, None])
    return RaceOutput(
        o=out.astype(inp.q.dtype, copy=False),
        den=den,
        degenerate_rows=tuple(np.nonzero(deg)[0].tolist()),
    )


def race_kernel(
    q, k, cfg: SketchConfig, *, table_batch: int = 256
) -> np.ndarray:
    """Averaged approximate kernel matrix over all ensemble-table slots.

    Quadratic by construction (entries phi(q_i) . phi(k_j)), so it is guarded
    to small N and used only for theory validation. Entries lie in [0, 1].
    """
    from .core import as_matrix

    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    if q.shape[1] != k.shape[1]:
        raise ValueError("q and k must share the embedding dimension")
    if max(q.shape[0], k.shape[0]) > KERNEL_MAX_ROWS:
        raise ValueError(f"race_kernel is limited to N <= {KERNEL_MAX_ROWS}")
    if cfg.normalize_inputs:
        q, k = row_normalize(q), row_normalize(k)

    dim = q.shape[1]
    tasks = [(m, l) for m in range(cfg.ensembles) for l in range(cfg.tables)]
    s_hat = np.zeros((q.shape[0], k.shape[0]), dtype=np.float64)

    if cfg.hyperplanes <= EXPLICIT_CORNER_LIMIT:
        corners = corner_matrix(cfg.hyperplanes)
        for start in range(0, len(tasks), table_batch):
            batch = tasks[start : start + table_batch]
            w = np.stack([table_hyperplanes(cfg, dim, m, l) for m, l in batch])
            phi_q = _batched_soft_features(q, w, corners, cfg.beta)
            phi_k = _batched_soft_features(k, w, corners, cfg.beta)
            s_hat += np.einsum("tnr,tmr->nm", phi_q, phi_k)
    else:
        for m, l in tasks:
            table = HashTable(table_hyperplanes(cfg, dim, m, l))
            s_hat += soft_features(q, table, cfg.beta) @ soft_features(k, table, cfg.beta).T
    return s_hat / cfg.total_tables


def _batched_soft_features(x, w_stack, corners, beta):
    # (T, n, p) projections -> (T, n, R) softmax over corners, all tables at once
    u = np.tanh(np.einsum("tpd,nd->tnp", w_stack, x))
    logits = beta * (u @ corners.T)
    logits -= logits.max(axis=2, keepdims=True)
    phi = np.exp(logits)
    phi /= phi.sum(axis=2, keepdims=True)
    return phi
