"""Closed-form anchor-regularized merging of module task vectors.

Per module, the merged vector solves U (G + lam*I) = C + lam*U0 via a
symmetric Cholesky solve; lam interpolates between the unregularized
least-squares fit (lam -> 0) and the anchor offset U0 (lam -> inf). The
Gaussian posterior around that estimate has row covariance (1/beta)(G+lam*I)^-1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import TaskVectorSet
from .errors import MissingConfigCell, MissingModule
from .linalg import cholesky_solve, derive_seed, sample_matrix_gaussian
from .stats import ASSISTED, DATA_FREE, MIXED, ModuleStats

MODES = (ASSISTED, DATA_FREE, MIXED)


@dataclass
class MergeConfig:
    """A point in the search space: per-cell lambdas, per-block scales, mix weight."""

    lambdas: dict[tuple[int, str], float]
    scales: dict[int, float]
    mode: str = DATA_FREE
    eps: float | None = None

    def to_json(self) -> dict:
        return {
            "lambdas": {f"{b}:{g}": v for (b, g), v in self.lambdas.items()},
            "scales": {str(b): v for b, v in self.scales.items()},
            "mode": self.mode,
            "eps": self.eps,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MergeConfig":
        lambdas = {}
        for key, v in obj["lambdas"].items():
            b, g = key.split(":", 1)
            lambdas[(int(b), g)] = float(v)
        scales = {int(b): float(v) for b, v in obj["scales"].items()}
        eps = obj.get("eps")
        return cls(lambdas=lambdas, scales=scales, mode=obj.get("mode", DATA_FREE),
                   eps=None if eps is None else float(eps))


def map_merge(stats: ModuleStats, anchor_vector: np.ndarray, lam: float) -> np.ndarray:
    """Solve U (G + lam*I) = C + lam*U0 for one module.

    lam = 0 is allowed; rank-deficient Grams fall back to the solver's jitter
    ladder.
    """
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    d_in = stats.gram.shape[0]
    lhs = stats.gram + lam * np.eye(d_in)
    rhs = (stats.cross + lam * anchor_vector).T
    return cholesky_solve(lhs, rhs, jitter=0.0).T


def merge_all(
    stats_map: dict[str, ModuleStats], tvs: TaskVectorSet, config: MergeConfig
) -> dict[str, np.ndarray]:
    """Apply map_merge per module with the (block, group)-tied lambda."""
    out = {}
    for name, meta in tvs.meta.items():
        if name not in stats_map:
            raise MissingModule(f"no stats for module {name!r}")
        cell = (meta.block, meta.group)
        if cell not in config.lambdas:
            raise MissingConfigCell(f"no lambda for cell {cell}")
        out[name] = map_merge(stats_map[name], tvs.anchor[name], config.lambdas[cell])
    return out


@dataclass
class ModulePosterior:
    """Gaussian posterior N(map_estimate, row_cov) over each row of the merged vector."""

    map_estimate: np.ndarray
    row_cov: np.ndarray
    beta: float


def posterior(
    stats: ModuleStats, anchor_vector: np.ndarray, lam: float, beta: float
) -> ModulePosterior:
    """MAP estimate plus row covariance (1/beta) (G + lam*I)^-1."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    d_in = stats.gram.shape[0]
    lhs = stats.gram + lam * np.eye(d_in)
    inv = cholesky_solve(lhs, np.eye(d_in), jitter=0.0)
    row_cov = (inv + inv.T) / (2.0 * beta)
    return ModulePosterior(
        map_estimate=map_merge(stats, anchor_vector, lam),
        row_cov=row_cov,
        beta=beta,
    )


def posterior_all(
    stats_map: dict[str, ModuleStats], tvs: TaskVectorSet, config: MergeConfig, beta: float
) -> dict[str, ModulePosterior]:
    out = {}
    for name, meta in tvs.meta.items():
        cell = (meta.block, meta.group)
        if cell not in config.lambdas:
            raise MissingConfigCell(f"no lambda for cell {cell}")
        out[name] = posterior(stats_map[name], tvs.anchor[name], config.lambdas[cell], beta)
    return out


def sample_merged(
    posteriors: dict[str, ModulePosterior], num_samples: int, rng_seed: int
) -> list[dict[str, np.ndarray]]:
    """Draw ``num_samples`` full merged-vector maps, every module independent.

    Seeds are derived per (sample, module) so results do not depend on
    evaluation order.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    names = list(posteriors)
    samples = []
    for s in range(num_samples):
        draw = {}
        for j, name in enumerate(names):
            p = posteriors[name]
            draw[name] = sample_matrix_gaussian(
                p.map_estimate, p.row_cov, derive_seed(rng_seed, s, j)
            )
        samples.append(draw)
    return samples
