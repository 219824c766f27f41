"""Anchor-regularized closed-form checkpoint merging with GP-driven
hyperparameter search, plus a self-contained toy multi-task harness."""

from .checkpoint import (
    Checkpoint,
    ModuleMeta,
    TaskVectorSet,
    assemble,
    load_checkpoint,
    save_checkpoint,
    ta_anchor,
    task_vectors,
)
from .linalg import cholesky_solve, frobenius_cos, sample_matrix_gaussian
from .merge import MergeConfig, ModulePosterior, map_merge, merge_all, posterior, sample_merged
from .stats import ModuleStats, alignment_report, collect_assisted, data_free_stats, mix_stats

__all__ = [
    "Checkpoint",
    "MergeConfig",
    "ModuleMeta",
    "ModulePosterior",
    "ModuleStats",
    "TaskVectorSet",
    "alignment_report",
    "assemble",
    "cholesky_solve",
    "collect_assisted",
    "data_free_stats",
    "frobenius_cos",
    "load_checkpoint",
    "map_merge",
    "merge_all",
    "mix_stats",
    "posterior",
    "sample_matrix_gaussian",
    "sample_merged",
    "save_checkpoint",
    "ta_anchor",
    "task_vectors",
]

__version__ = "0.1.0"
