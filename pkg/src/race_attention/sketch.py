"""Soft LSH feature maps over hypercube corners and per-table bucket statistics.

A hash table is a stack of Gaussian hyperplanes. Each input row is projected,
squashed through tanh, and softly assigned to the 2**p sign-pattern corners by
a temperature-beta softmax. The hard sign hash is the beta -> infinity limit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import MAX_HYPERPLANES, as_matrix, gaussian_matrix

# Above this many hyperplanes the explicit (2**p x p) corner matrix is not
# materialized; logits factorize into per-bit two-way softmaxes instead.
EXPLICIT_CORNER_LIMIT = 10


@dataclass(frozen=True)
class HashTable:
    """One table's Gaussian projection stack (n_bits x dim)."""

    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "w", as_matrix(self.w, "w"))
        if not (1 <= self.w.shape[0] <= MAX_HYPERPLANES):
            raise ValueError(
                f"hash table needs 1..{MAX_HYPERPLANES} hyperplanes, got {self.w.shape[0]}"
            )

    @property
    def n_bits(self) -> int:
        return self.w.shape[0]

    @property
    def n_buckets(self) -> int:
        return 1 << self.n_bits

    @property
    def dim(self) -> int:
        return self.w.shape[1]


def make_hash_table(rng: np.random.Generator, n_bits: int, dim: int) -> HashTable:
    return HashTable(gaussian_matrix(rng, n_bits, dim))


def corner_vector(index: int, n_bits: int) -> np.ndarray:
    """Corner of {+1, -1}**n_bits for a bucket index.

    Fixed little-endian convention: bit t of ``index`` selects component t,
    with bit value 0 -> +1 and bit value 1 -> -1.
    """
    if n_bits < 1:
        raise ValueError("n_bits must be >= 1")
    if not (0 <= index < (1 << n_bits)):
        raise ValueError(f"index {index} out of range for {n_bits} bits")
    bits = (index >> np.arange(n_bits)) & 1
    return 1.0 - 2.0 * bits


def corner_matrix(n_bits: int) -> np.ndarray:
    """All 2**n_bits corners stacked row-wise, in bucket-index order."""
    if not (1 <= n_bits <= EXPLICIT_CORNER_LIMIT):
        raise ValueError(
            f"explicit corner matrix limited to {EXPLICIT_CORNER_LIMIT} bits"
        )
    idx = np.arange(1 << n_bits)
    bits = (idx[:, None] >> np.arange(n_bits)[None, :]) & 1
    return 1.0 - 2.0 * bits


def _sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def soft_features(
    x, table: HashTable, beta: float, *, method: str = "auto"
) -> np.ndarray:
    """Row-stochastic soft assignment of each row of ``x`` to bucket corners.

    Row i is the softmax over corners r of beta * tanh(W x_i) . v_r. Two
    equivalent evaluation paths exist:

    * ``corners``: materialize the corner matrix and run a max-subtracted
      softmax over all 2**p logits (default for p <= EXPLICIT_CORNER_LIMIT).
    * ``factored``: the softmax factorizes across bits into products of
      two-way logistic assignments, avoiding the corner matrix (default
      above the limit).

    Both agree to ~1e-15 and that agreement is tested.
    """
    x = as_matrix(x, "x")
    if not (math.isfinite(beta) and beta > 0):
        raise ValueError("beta must be positive and finite")
    if method not in ("auto", "corners", "factored"):
        raise ValueError(f"unknown method {method!r}")
    if method == "auto":
        method = "corners" if table.n_bits <= EXPLICIT_CORNER_LIMIT else "factored"

    u = np.tanh(x @ table.w.T.astype(x.dtype, copy=False))
    if method == "corners":
        corners = corner_matrix(table.n_bits).astype(x.dtype, copy=False)
        logits = beta * (u @ corners.T)
        shifted = logits - logits.max(axis=1, keepdims=True)
        phi = np.exp(shifted)
        phi /= phi.sum(axis=1, keepdims=True)
        return phi

    # factored: per-bit P(+1) = sigmoid(2 beta u_t), P(-1) = sigmoid(-2 beta u_t)
    z = 2.0 * beta * u
    p_pos = _sigmoid(z)
    p_neg = _sigmoid(-z)
    phi = np.ones((x.shape[0], 1), dtype=x.dtype)
    for t in range(table.n_bits):
        phi = np.concatenate(
            [phi * p_pos[:, t : t + 1], phi * p_neg[:, t : t + 1]], axis=1
        )
    return phi


def dominant_corner_mass(x, table: HashTable, beta: float) -> np.ndarray:
    """Softmax mass each row places on its own sign corner.

    Closed form: the product over bits of sigmoid(2 beta |tanh(w_t . x)|).
    """
    x = as_matrix(x, "x")
    u = np.tanh(x @ table.w.T)
    return np.prod(_sigmoid(2.0 * beta * np.abs(u)), axis=1)


def hard_hash(x, table: HashTable) -> np.ndarray:
    """Bucket index of the sign corner of W x per row; zero projections tie to +1."""
    x = as_matrix(x, "x")
    z = x @ table.w.T.astype(x.dtype, copy=False)
    bits = (z < 0).astype(np.int64)
    weights = (1 << np.arange(table.n_bits)).astype(np.int64)
    return bits @ weights


@dataclass(frozen=True)
class BucketStats:
    """Per-table soft bucket mass (a, length R) and value sums (b, R x d_v)."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.a.ndim != 1 or self.b.ndim != 2 or self.a.shape[0] != self.b.shape[0]:
            raise ValueError("a must be length R and b must be R x d_v")


def bucket_stats(phi_k: np.ndarray, v: np.ndarray) -> BucketStats:
    """Aggregate keys into buckets: a = Phi^T 1, b = Phi^T V."""
    phi_k = as_matrix(phi_k, "phi_k")
    v = as_matrix(v, "v")
    if phi_k.shape[0] != v.shape[0]:
        raise ValueError(
            f"phi_k has {phi_k.shape[0]} rows but v has {v.shape[0]}"
        )
    return BucketStats(a=phi_k.sum(axis=0), b=phi_k.T @ v)
