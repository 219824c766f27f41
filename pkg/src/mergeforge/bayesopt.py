"""Global hyperparameter search: unit-cube space with block tying, an exact
GP surrogate (squared-exponential kernel, grid ML-II), expected improvement,
and the sequential search loop with a resumable JSONL trial log.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .errors import EvaluatorFailure, OutOfRange
from .linalg import cholesky_factor, derive_seed
from .merge import MIXED, MergeConfig

SIGNAL_VAR_GRID = (0.5, 1.0, 2.0)
LENGTHSCALE_GRID = (0.1, 0.2, 0.5, 1.0)
NOISE_VAR = 1e-6
DEFAULT_XI = 0.01
DEFAULT_CANDIDATES = 2048
INCUMBENT_STD = 0.05


@dataclass(frozen=True)
class Dim:
    """One search dimension; ``log`` selects log-uniform scaling over [lo, hi]."""

    name: str
    lo: float
    hi: float
    log: bool = False

    def decode(self, u: float) -> float:
        if self.log:
            return self.lo * (self.hi / self.lo) ** u
        return self.lo + u * (self.hi - self.lo)

    def encode(self, v: float) -> float:
        if self.log:
            return math.log(v / self.lo) / math.log(self.hi / self.lo)
        return (v - self.lo) / (self.hi - self.lo)


@dataclass
class SearchSpace:
    """Ordered dims mapping merge configs onto the unit cube.

    Dim names follow ``s:<block>``, ``lam:<block>:<group>``, and ``eps``; one
    scale plus one lambda per group for every block, plus the mix weight in
    mixed mode.
    """

    dims: list[Dim]
    mode: str

    @classmethod
    def from_cells(
        cls,
        cells: list[tuple[int, str]],
        lam_range: tuple[float, float],
        s_range: tuple[float, float],
        mode: str,
    ) -> "SearchSpace":
        if lam_range[0] <= 0:
            raise OutOfRange("log-uniform lambda range needs a positive lower bound")
        dims = []
        for block in sorted({b for b, _ in cells}):
            dims.append(Dim(f"s:{block}", s_range[0], s_range[1]))
            for b, group in sorted(cells):
                if b == block:
                    dims.append(Dim(f"lam:{b}:{group}", lam_range[0], lam_range[1], log=True))
        if mode == MIXED:
            dims.append(Dim("eps", 0.0, 1.0))
        return cls(dims=dims, mode=mode)

    @property
    def dim(self) -> int:
        return len(self.dims)

    def decode(self, point: np.ndarray) -> MergeConfig:
        point = np.asarray(point, dtype=np.float64)
        if point.shape != (self.dim,):
            raise OutOfRange(f"point has shape {point.shape}, space is {self.dim}-D")
        if np.any(point < 0.0) or np.any(point > 1.0):
            raise OutOfRange("point lies outside the unit cube")
        lambdas: dict[tuple[int, str], float] = {}
        scales: dict[int, float] = {}
        eps = None
        for d, u in zip(self.dims, point):
            v = d.decode(float(u))
            kind, _, rest = d.name.partition(":")
            if kind == "s":
                scales[int(rest)] = v
            elif kind == "lam":
                b, g = rest.split(":", 1)
                lambdas[(int(b), g)] = v
            else:
                eps = v
        return MergeConfig(lambdas=lambdas, scales=scales, mode=self.mode, eps=eps)

    def encode(self, config: MergeConfig) -> np.ndarray:
        out = np.empty(self.dim)
        for i, d in enumerate(self.dims):
            kind, _, rest = d.name.partition(":")
            if kind == "s":
                v = config.scales[int(rest)]
            elif kind == "lam":
                b, g = rest.split(":", 1)
                v = config.lambdas[(int(b), g)]
            else:
                v = config.eps
            out[i] = d.encode(v)
        return out


# ---------------------------------------------------------------------------
# trial history


@dataclass
class TrialRecord:
    index: int
    config: MergeConfig | None
    x: np.ndarray
    score: float
    wall_time_s: float = 0.0


def append_record_jsonl(path, rec: TrialRecord) -> None:
    line = json.dumps(
        {
            "trial": rec.index,
            "config": None if rec.config is None else rec.config.to_json(),
            "score": rec.score,
            "wall_time_s": rec.wall_time_s,
        },
        sort_keys=True,
    )
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line + "\n")


@dataclass
class TrialHistory:
    records: list[TrialRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: TrialRecord) -> None:
        self.records.append(record)

    def points(self) -> np.ndarray:
        return np.array([r.x for r in self.records])

    def scores(self) -> np.ndarray:
        return np.array([r.score for r in self.records])

    def best(self) -> TrialRecord:
        scores = self.scores()
        return self.records[int(np.argmax(scores))]  # earliest wins ties

    def running_best(self) -> np.ndarray:
        return np.maximum.accumulate(self.scores())

    def append_jsonl(self, path) -> None:
        append_record_jsonl(path, self.records[-1])

    @classmethod
    def from_jsonl(cls, path, space: SearchSpace) -> "TrialHistory":
        history = cls()
        text = Path(path).read_text(encoding="utf-8")
        for line in text.splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            config = MergeConfig.from_json(obj["config"]) if obj["config"] else None
            x = space.encode(config) if config is not None else np.zeros(space.dim)
            history.append(
                TrialRecord(obj["trial"], config, x, float(obj["score"]), obj.get("wall_time_s", 0.0))
            )
        return history


# ---------------------------------------------------------------------------
# Gaussian process surrogate


@dataclass
class GPModel:
    x: np.ndarray  # n x D observed unit points
    f: np.ndarray  # n raw scores
    f_mean: float
    f_std: float
    signal_var: float
    lengthscale: float
    noise_var: float
    chol_lower: np.ndarray
    alpha: np.ndarray  # (K + noise)^-1 y_std


def _kernel(a: np.ndarray, b: np.ndarray, signal_var: float, lengthscale: float) -> np.ndarray:
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return signal_var * np.exp(-0.5 * d2 / lengthscale**2)


def gp_fit(history: TrialHistory, candidate_hyperparams=None) -> GPModel:
    """Exact GP over the history, hyperparameters by grid marginal likelihood.

    Scores are standardized internally; the noise variance is fixed small so
    the posterior mean interpolates noiseless observations.
    """
    x = history.points()
    f = history.scores()
    if len(f) < 2:
        raise ValueError("need at least 2 observations to fit the surrogate")
    f_mean = float(f.mean())
    f_std = float(f.std())
    if f_std < 1e-12:
        f_std = 1.0
    y = (f - f_mean) / f_std

    if candidate_hyperparams is None:
        candidate_hyperparams = [
            (sv, ls) for sv in SIGNAL_VAR_GRID for ls in LENGTHSCALE_GRID
        ]
    best = None
    n = len(y)
    for signal_var, lengthscale in candidate_hyperparams:
        k = _kernel(x, x, signal_var, lengthscale)
        lower, _ = cholesky_factor(k + NOISE_VAR * np.eye(n))
        alpha = np.linalg.solve(lower.T, np.linalg.solve(lower, y))
        log_ml = (
            -0.5 * float(y @ alpha)
            - float(np.log(np.diag(lower)).sum())
            - 0.5 * n * math.log(2.0 * math.pi)
        )
        if best is None or log_ml > best[0]:
            best = (log_ml, signal_var, lengthscale, lower, alpha)
    _, signal_var, lengthscale, lower, alpha = best
    return GPModel(
        x=x,
        f=f,
        f_mean=f_mean,
        f_std=f_std,
        signal_var=signal_var,
        lengthscale=lengthscale,
        noise_var=NOISE_VAR,
        chol_lower=lower,
        alpha=alpha,
    )


def gp_predict_batch(model: GPModel, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and stddev (score units) at each row of ``points``."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    ks = _kernel(model.x, points, model.signal_var, model.lengthscale)  # n x m
    mu_std = ks.T @ model.alpha
    v = np.linalg.solve(model.chol_lower, ks)
    var_std = np.clip(model.signal_var - (v**2).sum(axis=0), 0.0, None)
    mu = model.f_mean + model.f_std * mu_std
    sigma = model.f_std * np.sqrt(var_std)
    return mu, sigma


def gp_predict(model: GPModel, point: np.ndarray) -> tuple[float, float]:
    mu, sigma = gp_predict_batch(model, np.asarray(point)[None, :])
    return float(mu[0]), float(sigma[0])


def expected_improvement(mu, sigma, f_best: float, xi: float = 0.0):
    """EI for maximization: (mu - f_best - xi) Phi(z) + sigma phi(z)."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    diff = mu - f_best - xi
    ei = np.maximum(diff, 0.0)
    positive = sigma > 0
    if np.any(positive):
        z = np.where(positive, diff / np.where(positive, sigma, 1.0), 0.0)
        ei = np.where(positive, diff * norm.cdf(z) + sigma * norm.pdf(z), ei)
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def propose(
    model: GPModel,
    space: SearchSpace,
    rng_seed: int,
    n_candidates: int = DEFAULT_CANDIDATES,
    xi: float = DEFAULT_XI,
) -> np.ndarray:
    """Maximize EI over random candidates plus a perturbed incumbent."""
    if n_candidates < 1:
        raise ValueError("need at least one candidate")
    rng = np.random.default_rng(rng_seed)
    cands = rng.uniform(size=(n_candidates, space.dim))
    incumbent = model.x[int(np.argmax(model.f))]
    perturbed = np.clip(incumbent + rng.normal(0.0, INCUMBENT_STD, size=space.dim), 0.0, 1.0)
    cands = np.vstack([cands, perturbed])
    mu, sigma = gp_predict_batch(model, cands)
    ei = expected_improvement(mu, sigma, float(model.f.max()), xi)
    return cands[int(np.argmax(ei))]


def bo_search(
    space: SearchSpace,
    evaluator,
    total_trials: int,
    n_init: int,
    seed: int,
    n_candidates: int = DEFAULT_CANDIDATES,
    xi: float = DEFAULT_XI,
    history: TrialHistory | None = None,
    on_trial=None,
) -> tuple[MergeConfig, TrialHistory]:
    """Sequential search: ``n_init`` uniform trials, then GP + EI proposals.

    Passing a pre-populated ``history`` resumes an interrupted run; trial
    randomness is derived per trial index, so a resumed search matches an
    uninterrupted one. Evaluator exceptions surface as EvaluatorFailure with
    the partial history attached.
    """
    if not 2 <= n_init <= total_trials:
        raise ValueError(f"need total_trials >= n_init >= 2, got {total_trials}, {n_init}")
    history = history if history is not None else TrialHistory()
    for k in range(len(history), total_trials):
        trial_seed = derive_seed(seed, 5, k)
        if k < n_init:
            x = np.random.default_rng(trial_seed).uniform(size=space.dim)
        else:
            model = gp_fit(history)
            x = propose(model, space, trial_seed, n_candidates, xi)
        config = space.decode(x)
        start = time.perf_counter()
        try:
            value = float(evaluator(config))
        except Exception as exc:
            raise EvaluatorFailure(f"trial {k} failed: {exc}", history=history) from exc
        if not math.isfinite(value):
            raise EvaluatorFailure(f"trial {k} returned non-finite score", history=history)
        record = TrialRecord(k, config, x, value, time.perf_counter() - start)
        history.append(record)
        if on_trial is not None:
            on_trial(record)
    best = history.best()
    return best.config, history
