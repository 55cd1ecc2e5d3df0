"""Brute-force scalar re-implementation of the sketched forward pass.

Everything here is deliberately written with explicit Python loops over
ensembles, tables, rows, buckets, and coordinates, independent of the
vectorized path, so the two can be checked against each other. Causal mode
re-runs the non-causal scalar computation on every prefix instead of
maintaining a running scan.

Scale-guarded: this exists for equivalence testing, not for use.
"""

from __future__ import annotations

import math

import numpy as np

from .core import (
    DEGENERATE_DEN_EPS,
    ZERO_ROW_EPS,
    SketchConfig,
    derive_table_rng,
    gaussian_matrix,
)
from .exact import AttnInputs
from .forward import RaceOutput

ORACLE_MAX_ROWS = 512


def _normalize_rows(rows):
    out = []
    for row in rows:
        norm = math.sqrt(sum(x * x for x in row))
        if norm < ZERO_ROW_EPS:
            out.append(list(row))
        else:
            out.append([x / norm for x in row])
    return out


def _corner_sign(index, bit):
    return -1.0 if (index >> bit) & 1 else 1.0


def _soft_row(x, w, beta, n_bits):
    # logits over all corners, then a max-subtracted softmax
    u = []
    for t in range(n_bits):
        proj = sum(w[t][c] * x[c] for c in range(len(x)))
        u.append(math.tanh(proj))
    n_corners = 1 << n_bits
    logits = []
    for r in range(n_corners):
        s = 0.0
        for t in range(n_bits):
            s += u[t] * _corner_sign(r, t)
        logits.append(beta * s)
    top = max(logits)
    exps = [math.exp(val - top) for val in logits]
    total = sum(exps)
    return [e / total for e in exps]


def _prefix_num_den(phi_q_row, phi_k_rows, v_rows, n_keys, n_corners, dim_v):
    # bucket statistics over the first n_keys keys, then one query readout
    a = [0.0] * n_corners
    b = [[0.0] * dim_v for _ in range(n_corners)]
    for j in range(n_keys):
        for r in range(n_corners):
            a[r] += phi_k_rows[j][r]
            for c in range(dim_v):
                b[r][c] += phi_k_rows[j][r] * v_rows[j][c]
    den = 0.0
    num = [0.0] * dim_v
    for r in range(n_corners):
        den += phi_q_row[r] * a[r]
        for c in range(dim_v):
            num[c] += phi_q_row[r] * b[r][c]
    return num, den


def race_attention_oracle(inp: AttnInputs, cfg: SketchConfig) -> RaceOutput:
    """Scalar-loop evaluation of the same estimator, for equivalence tests."""
    n = inp.n
    if n > ORACLE_MAX_ROWS:
        raise ValueError(f"oracle is limited to N <= {ORACLE_MAX_ROWS}")
    dim, dim_v = inp.dim, inp.dim_v
    n_corners = cfg.n_buckets

    q_rows = [list(map(float, row)) for row in np.asarray(inp.q, dtype=np.float64)]
    k_rows = [list(map(float, row)) for row in np.asarray(inp.k, dtype=np.float64)]
    v_rows = [list(map(float, row)) for row in np.asarray(inp.v, dtype=np.float64)]
    if cfg.normalize_inputs:
        q_rows = _normalize_rows(q_rows)
        k_rows = _normalize_rows(k_rows)

    num = [[0.0] * dim_v for _ in range(n)]
    den = [0.0] * n
    for m in range(cfg.ensembles):
        for l in range(cfg.tables):
            rng = derive_table_rng(cfg.seed, m, l)
            w = gaussian_matrix(rng, cfg.hyperplanes, dim).tolist()
            phi_q = [_soft_row(row, w, cfg.beta, cfg.hyperplanes) for row in q_rows]
            phi_k = [_soft_row(row, w, cfg.beta, cfg.hyperplanes) for row in k_rows]

            for i in range(n):
                n_keys = i + 1 if cfg.causal else n
                t_num, t_den = _prefix_num_den(
                    phi_q[i], phi_k, v_rows, n_keys, n_corners, dim_v
                )
                den[i] += t_den
                for c in range(dim_v):
                    num[i][c] += t_num[c]

    scale = 1.0 / cfg.total_tables
    out = np.zeros((n, dim_v), dtype=np.float64)
    den_arr = np.empty(n, dtype=np.float64)
    degenerate = []
    for i in range(n):
        d_i = den[i] * scale
        den_arr[i] = d_i
        if d_i <= DEGENERATE_DEN_EPS:
            degenerate.append(i)
        else:
            for c in range(dim_v):
                out[i, c] = num[i][c] * scale / d_i
    return RaceOutput(o=out, den=den_arr, degenerate_rows=tuple(degenerate))
