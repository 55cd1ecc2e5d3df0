"""Linear-time attention via soft locality-sensitive-hash sketches.

Keys and values are aggregated into per-bucket summaries under randomized
sign hashes made differentiable by a temperature-controlled softmax over
hypercube corners; queries mix the summaries instead of attending to every
key. Exact quadratic references, hand-derived gradients, statistical
validation of the estimator's bias-variance behavior, and a wall-clock
scaling benchmark are included.
"""

from .backward import (
    FiniteDiffReport,
    RaceGradients,
    finite_diff_check,
    race_attention_vjp,
)
from .bench import BenchMethod, BenchRecord, bench_scaling, demo_kernel_heatmap
from .core import (
    SketchConfig,
    derive_table_rng,
    gaussian_matrix,
    row_normalize,
)
from .exact import (
    AttnInputs,
    angular_attention,
    angular_kernel_matrix,
    angular_similarity,
    softmax_attention,
)
from .forward import RaceOutput, race_attention, race_kernel
from .oracle import race_attention_oracle
from .sketch import (
    BucketStats,
    HashTable,
    bucket_stats,
    corner_matrix,
    corner_vector,
    hard_hash,
    make_hash_table,
    soft_features,
)
from .theory import (
    CollisionReport,
    RowSumReport,
    ScalingExperiment,
    bias_sweep,
    collision_identity_check,
    hard_race_attention,
    kernel_deviation,
    output_rms_error,
    row_sum_stability,
    variance_sweep,
)

__version__ = "0.1.0"

__all__ = [
    "AttnInputs",
    "BenchMethod",
    "BenchRecord",
    "BucketStats",
    "CollisionReport",
    "FiniteDiffReport",
    "HashTable",
    "RaceGradients",
    "RaceOutput",
    "RowSumReport",
    "ScalingExperiment",
    "SketchConfig",
    "angular_attention",
    "angular_kernel_matrix",
    "angular_similarity",
    "bench_scaling",
    "bias_sweep",
    "bucket_stats",
    "collision_identity_check",
    "corner_matrix",
    "corner_vector",
    "demo_kernel_heatmap",
    "derive_table_rng",
    "finite_diff_check",
    "gaussian_matrix",
    "hard_hash",
    "hard_race_attention",
    "kernel_deviation",
    "make_hash_table",
    "output_rms_error",
    "race_attention",
    "race_attention_oracle",
    "race_attention_vjp",
    "race_kernel",
    "row_normalize",
    "row_sum_stability",
    "soft_features",
    "softmax_attention",
    "variance_sweep",
]
