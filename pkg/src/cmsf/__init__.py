"""Constrained mean-shift representation learning on synthetic embedding
datasets, with supervised / semi-supervised / self-constrained / cross-space
neighbor constraints, diagnostics, and training-compute accounting."""

__version__ = "0.1.0"

from .core import Stream, make_rng  # noqa: F401
from .data import AugmentSpec, Dataset, gen_mixture  # noqa: F401
from .evaluation import diagnostics_sweep, evaluate_encoder, knn_eval  # noqa: F401
from .trainer import TrainConfig, TrainResult, train  # noqa: F401
