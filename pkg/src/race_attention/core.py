"""Shared primitives: input validation, seeded randomness, row normalization.

Everything downstream works on plain 2-D numpy arrays ("matrices"): float64
for validation and theory work, float32 as an opt-in for benchmarking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Rows with Euclidean norm below this pass through row_normalize unchanged.
ZERO_ROW_EPS = 1e-12

# Averaged denominators at or below this are treated as degenerate: the
# corresponding output row is zeroed and the row index is flagged.
DEGENERATE_DEN_EPS = 1e-30

# Hard cap on hyperplanes per table; the corner set has 2**p elements.
MAX_HYPERPLANES = 20

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def as_matrix(x, name: str = "matrix", dtype=None) -> np.ndarray:
    """Validate ``x`` as a 2-D array of finite floats and return it.

    Non-float input is converted to float64. Raises ValueError for wrong
    dimensionality or non-finite entries.
    """
    a = np.asarray(x)
    if dtype is not None:
        a = a.astype(dtype, copy=False)
    elif a.dtype not in _FLOAT_DTYPES:
        a = a.astype(np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True)
class SketchConfig:
    """Hyperparameters of the sketched attention estimator.

    Attributes:
        hyperplanes: random hyperplanes per hash table (buckets = 2**hyperplanes).
        tables: independent hash tables averaged per ensemble.
        ensembles: outer replications of the whole scheme; all
            ensembles * tables table estimates are averaged together.
        beta: softmax temperature of the soft bucket assignment (> 0).
        seed: base seed; per-table streams are derived from it.
        causal: restrict position t to keys 1..t via a streaming prefix scan.
        normalize_inputs: unit-normalize query/key rows before hashing.
        block_size: row-chunk size used to bound peak memory at large N.
    """

    hyperplanes: int
    tables: int
    ensembles: int = 1
    beta: float = 8.0
    seed: int = 0
    causal: bool = False
    normalize_inputs: bool = True
    block_size: int = 4096

    def __post_init__(self):
        if not (1 <= self.hyperplanes <= MAX_HYPERPLANES):
            raise ValueError(
                f"hyperplanes must be in [1, {MAX_HYPERPLANES}], got {self.hyperplanes}"
            )
        if self.tables < 1:
            raise ValueError("tables must be >= 1")
        if self.ensembles < 1:
            raise ValueError("ensembles must be >= 1")
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise ValueError("beta must be positive and finite")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")

    @property
    def n_buckets(self) -> int:
        return 1 << self.hyperplanes

    @property
    def total_tables(self) -> int:
        return self.ensembles * self.tables


def derive_table_rng(seed: int, ensemble: int, table: int) -> np.random.Generator:
    """Deterministic generator for one (ensemble, table) slot.

    Mixing is numpy's SeedSequence with ``spawn_key=(ensemble, table)``:
    identical arguments yield identical streams, distinct index pairs yield
    independently seeded streams under the same base seed.
    """
    if ensemble < 0 or table < 0:
        raise ValueError("ensemble and table indices must be non-negative")
    entropy = int(seed) & 0xFFFFFFFFFFFFFFFF
    ss = np.random.SeedSequence(entropy=entropy, spawn_key=(ensemble, table))
    return np.random.default_rng(ss)


def gaussian_matrix(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """rows x cols matrix of i.i.d. standard normals, float64."""
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    return rng.standard_normal((rows, cols))


def row_normalize(x) -> np.ndarray:
    """Scale each row to unit Euclidean norm.

    Rows with norm below ZERO_ROW_EPS are returned unchanged; the arccos
    clamp downstream absorbs the consequences.
    """
    x = as_matrix(x, "x")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    scale = np.where(norms < ZERO_ROW_EPS, x.dtype.type(1.0), norms)
    return x / scale


def row_normalize_vjp(x_raw: np.ndarray, grad_normalized: np.ndarray) -> np.ndarray:
    """Pull a cotangent on row_normalize(x_raw) back to x_raw.

    For a unit-normalized row the gradient lives in the tangent space of the
    sphere: g -> (g - (g . xhat) xhat) / ||x||. Zero-guarded rows pass the
    cotangent through unchanged, matching the forward pass-through.
    """
    norms = np.linalg.norm(x_raw, axis=1, keepdims=True)
    small = norms < ZERO_ROW_EPS
    safe = np.where(small, 1.0, norms)
    xhat = x_raw / safe
    radial = np.sum(grad_normalized * xhat, axis=1, keepdims=True)
    grad = (grad_normalized - radial * xhat) / safe
    return np.where(small, grad_normalized, grad)
