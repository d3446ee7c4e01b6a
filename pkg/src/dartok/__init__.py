"""Differentiable adaptive region tokenizer.

An image is scored on a coarse grid, the score map is turned into a
partition of the image whose cells carry equal score mass, and every cell
is resampled to a fixed-size patch before linear projection. All stages
have analytic backward passes, so the whole tokenizer trains end-to-end.
"""
from .partition import Partition, partition_irregular, partition_regular, partition_scores
from .quantile import PiecewiseDistribution, quantile_jacobian, uniform_quantiles
from .scoremap import LearnableScorer, normalize_scores, score_pixel_energy
from .tokenize import (
    ProjectionWeights,
    TokenizerConfig,
    count_cost,
    init_posembed,
    tokenize,
    tokenize_uniform_baseline,
)

__version__ = "0.1.0"

__all__ = [
    "Partition",
    "partition_irregular",
    "partition_regular",
    "partition_scores",
    "PiecewiseDistribution",
    "quantile_jacobian",
    "uniform_quantiles",
    "LearnableScorer",
    "normalize_scores",
    "score_pixel_energy",
    "ProjectionWeights",
    "TokenizerConfig",
    "count_cost",
    "init_posembed",
    "tokenize",
    "tokenize_uniform_baseline",
]
