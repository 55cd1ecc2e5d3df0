"""Exact quadratic attention references.

Two ground truths live here: standard scaled-dot-product softmax attention
and its sharpened angular-kernel counterpart. Both are O(N^2) by design and
serve as the baseline every sketched estimate is measured against.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import DEGENERATE_DEN_EPS, as_matrix


@dataclass(frozen=True)
class AttnInputs:
    """Per-head query/key/value matrices.

    q and k are N x d; v is N x d_v (the output width may differ from d).
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", as_matrix(self.q, "q"))
        object.__setattr__(self, "k", as_matrix(self.k, "k"))
        object.__setattr__(self, "v", as_matrix(self.v, "v"))
        if self.q.shape != self.k.shape:
            raise ValueError(f"q and k shapes differ: {self.q.shape} vs {self.k.shape}")
        if self.v.shape[0] != self.q.shape[0]:
            raise ValueError(
                f"v has {self.v.shape[0]} rows but q/k have {self.q.shape[0]}"
            )

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def dim(self) -> int:
        return self.q.shape[1]

    @property
    def dim_v(self) -> int:
        return self.v.shape[1]


def softmax_attention(inp: AttnInputs, causal: bool = False) -> np.ndarray:
    """softmax(Q K^T / sqrt(d)) V with optional causal masking."""
    q, k, v = inp.q, inp.k, inp.v
    n, d = q.shape
    scores = (q @ k.T) / np.asarray(math.sqrt(d), dtype=q.dtype)
    if causal:
        mask = np.triu(np.ones((n, n), dtype=bool), k=1)
        scores = np.where(mask, -np.inf, scores)
    shifted = scores - scores.max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ v


def softmax_attention_vjp(
    inp: AttnInputs, d_out: np.ndarray, causal: bool = False
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reverse-mode gradients (dQ, dK, dV) of softmax_attention.

    Used by the benchmark harness for forward+backward timings.
    """
    q, k, v = inp.q, inp.k, inp.v
    n, d = q.shape
    d_out = as_matrix(d_out, "d_out", dtype=q.dtype)
    inv_sqrt_d = np.asarray(1.0 / math.sqrt(d), dtype=q.dtype)
    scores = (q @ k.T) * inv_sqrt_d
    if causal:
        mask = np.triu(np.ones((n, n), dtype=bool), k=1)
        scores = np.where(mask, -np.inf, scores)
    shifted = scores - scores.max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    weights /= weights.sum(axis=1, keepdims=True)

    d_v = weights.T @ d_out
    d_weights = d_out @ v.T
    # softmax rows: dS = W * (dW - sum(dW * W))
    d_scores = weights * (d_weights - np.sum(d_weights * weights, axis=1, keepdims=True))
    d_q = (d_scores @ k) * inv_sqrt_d
    d_k = (d_scores.T @ q) * inv_sqrt_d
    return d_q, d_k, d_v


def angular_similarity(q, k, gamma: int) -> float:
    """Sharpened angular similarity (1 - theta/pi)**gamma between two vectors.

    Depends only on the angle between q and k; the dot product is clamped to
    [-1, 1] before arccos so floating-point drift cannot produce NaN.
    """
    if not (isinstance(gamma, (int, np.integer)) and gamma >= 1):
        raise ValueError(f"gamma must be a positive integer, got {gamma!r}")
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    k = np.asarray(k, dtype=np.float64).reshape(-1)
    if q.shape != k.shape:
        raise ValueError("q and k must have equal length")
    nq = math.sqrt(float(q @ q))
    nk = math.sqrt(float(k @ k))
    if nq == 0.0 or nk == 0.0:
        raise ValueError("angular_similarity requires nonzero vectors")
    rho = min(1.0, max(-1.0, float(q @ k) / (nq * nk)))
    return (1.0 - math.acos(rho) / math.pi) ** int(gamma)


def angular_kernel_matrix(q: np.ndarray, k: np.ndarray, gamma: int) -> np.ndarray:
    """Dense similarity matrix S with S[i, j] = angular_similarity(q_i, k_j, gamma)."""
    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    qn = np.linalg.norm(q, axis=1)
    kn = np.linalg.norm(k, axis=1)
    if np.any(qn == 0) or np.any(kn == 0):
        raise ValueError("zero-norm rows are not allowed")
    rho = np.clip((q @ k.T) / np.outer(qn, kn), -1.0, 1.0)
    return (1.0 - np.arccos(rho) / np.pi) ** int(gamma)


def angular_attention(inp: AttnInputs, gamma: int, causal: bool = False) -> np.ndarray:
    """Row-normalized attention under the sharpened angular kernel.

    O_i is the similarity-weighted average of values over keys j (j <= i in
    causal mode). A row whose similarity sum falls at or below the degeneracy
    floor is zeroed and reported via a warning.

    Each output row is computed from a row-wise matrix-vector product so that
    the causal output at row i is bit-identical to the non-causal output on
    the length-(i+1) prefix.
    """
    if not (isinstance(gamma, (int, np.integer)) and gamma >= 1):
        raise ValueError(f"gamma must be a positive integer, got {gamma!r}")
    q, k, v = inp.q, inp.k, inp.v
    n = inp.n
    q_norms = np.linalg.norm(q, axis=1)
    k_norms = np.linalg.norm(k, axis=1)
    if np.any(q_norms == 0) or np.any(k_norms == 0):
        raise ValueError("zero-norm rows are not allowed; normalize or guard first")

    out = np.zeros((n, inp.dim_v), dtype=q.dtype)
    degenerate: list[int] = []
    for i in range(n):
        limit = i + 1 if causal else n
        rho = (k[:limit] @ q[i]) / (k_norms[:limit] * q_norms[i])
        sims = (1.0 - np.arccos(np.clip(rho, -1.0, 1.0)) / np.pi) ** int(gamma)
        den = sims.sum()
        if den <= DEGENERATE_DEN_EPS:
            degenerate.append(i)
        else:
            out[i] = (sims @ v[:limit]) / den
    if degenerate:
        warnings.warn(
            f"angular_attention: {len(degenerate)} degenerate row(s) zeroed: "
            f"{degenerate[:8]}{'...' if len(degenerate) > 8 else ''}",
            RuntimeWarning,
            stacklevel=2,
        )
    return out


def angular_attention_vjp(
    inp: AttnInputs, gamma: int, d_out: np.ndarray, causal: bool = False
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reverse-mode gradients of angular_attention, for benchmark timings.

    The arccos clamp makes the derivative zero wherever |rho| >= 1, so exactly
    aligned or antipodal pairs contribute no gradient through the kernel.
    """
    q, k, v = inp.q, inp.k, inp.v
    n, d = q.shape
    d_out = as_matrix(d_out, "d_out", dtype=q.dtype)
    g = int(gamma)

    qn = np.linalg.norm(q, axis=1, keepdims=True)
    kn = np.linalg.norm(k, axis=1, keepdims=True)
    if np.any(qn == 0) or np.any(kn == 0):
        raise ValueError("zero-norm rows are not allowed")
    qh, kh = q / qn, k / kn

    rho = qh @ kh.T
    clipped = np.abs(rho) >= 1.0
    rho = np.clip(rho, -1.0, 1.0)
    base = 1.0 - np.arccos(rho) / np.pi
    sims = base**g
    if causal:
        mask = np.triu(np.ones((n, n), dtype=bool), k=1)
        sims = np.where(mask, 0.0, sims)

    den = sims.sum(axis=1, keepdims=True)
    deg = den <= DEGENERATE_DEN_EPS
    safe_den = np.where(deg, 1.0, den)
    out = (sims @ v) / safe_den
    out = np.where(deg, 0.0, out)

    d_v = (sims / safe_den).T @ d_out
    d_sims = (d_out @ v.T - np.sum(d_out * out, axis=1, keepdims=True)) / safe_den
    d_sims = np.where(deg, 0.0, d_sims)
    if causal:
        d_sims = np.where(mask, 0.0, d_sims)
    # d sims / d rho = g * base**(g-1) / (pi * sqrt(1 - rho^2)); zero at the clamp
    with np.errstate(divide="ignore", invalid="ignore"):
        d_rho = d_sims * g * base ** (g - 1) / (np.pi * np.sqrt(1.0 - rho * rho))
    d_rho = np.where(clipped, 0.0, d_rho)

    d_qh = d_rho @ kh
    d_kh = d_rho.T @ qh
    # pull back through the unit normalization of each row
    d_q = (d_qh - np.sum(d_qh * qh, axis=1, keepdims=True) * qh) / qn
    d_k = (d_kh - np.sum(d_kh * kh, axis=1, keepdims=True) * kh) / kn
    return d_q, d_k, d_v
