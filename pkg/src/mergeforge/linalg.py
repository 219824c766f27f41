"""Dense float64 linear algebra used everywhere else.

All matrices are plain 2D C-contiguous ``numpy.ndarray`` of dtype float64;
``as_matrix`` is the single validation gate. Solves are Cholesky-based with a
jitter-escalation ladder for near-singular symmetric systems.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, NotPositiveDefinite, ZeroMatrix

# Extra diagonal mass tried (scaled by trace/d) when a factorization fails.
JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6)


def derive_seed(*parts: int) -> int:
    """Deterministic child seed from an integer path (run seed, indices...)."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Validate and return a float64 C-contiguous 2D matrix.

    Raises DimensionMismatch if the value is not 2D or does not match the
    expected shape, and ValueError if any entry is NaN/Inf.
    """
    a = np.ascontiguousarray(data, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionMismatch(f"expected a 2D matrix, got ndim={a.ndim}")
    if rows is not None and a.shape[0] != rows:
        raise DimensionMismatch(f"expected {rows} rows, got {a.shape[0]}")
    if cols is not None and a.shape[1] != cols:
        raise DimensionMismatch(f"expected {cols} cols, got {a.shape[1]}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains NaN or Inf")
    return a


def cholesky_factor(a: np.ndarray, jitter: float = 0.0) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``a + jitter*I`` with jitter escalation.

    Returns (L, total_jitter). On top of the caller's ``jitter``, extra
    diagonal mass from JITTER_LADDER (scaled by trace(a)/d) is tried until a
    factorization succeeds; NotPositiveDefinite is raised if every rung fails.
    """
    a = as_matrix(a)
    d = a.shape[0]
    if a.shape[1] != d:
        raise DimensionMismatch(f"matrix must be square, got {a.shape}")
    scale = np.trace(a) / d
    eye = np.eye(d)
    tried = []
    for rung in JITTER_LADDER:
        total = jitter + rung * scale
        tried.append(total)
        try:
            lower = np.linalg.cholesky(a + total * eye)
        except np.linalg.LinAlgError:
            continue
        return lower, total
    raise NotPositiveDefinite(
        f"Cholesky failed for {d}x{d} matrix; jitters tried: {tried}"
    )


def cholesky_solve(a: np.ndarray, b: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """Solve ``(a + jitter*I) x = b`` for symmetric positive definite ``a``.

    ``a`` must be symmetric; ``b`` may have any number of columns. Near-singular
    systems are rescued by the escalation ladder in ``cholesky_factor``.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"lhs must be square, got {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise DimensionMismatch(f"rhs has {b.shape[0]} rows, lhs is {a.shape[0]}x{a.shape[1]}")
    lower, _ = cholesky_factor(a, jitter)
    y = scipy.linalg.solve_triangular(lower, b, lower=True)
    return scipy.linalg.solve_triangular(lower.T, y, lower=False)


def frobenius_cos(a: np.ndarray, b: np.ndarray) -> float:
    """Frobenius cosine similarity Tr(aᵀb) / (‖a‖_F ‖b‖_F), clipped to [-1, 1]."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shape mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroMatrix("frobenius_cos is undefined for a zero operand")
    return float(np.clip(np.tensordot(a, b) / (na * nb), -1.0, 1.0))


def sample_matrix_gaussian(mean: np.ndarray, row_cov: np.ndarray, rng_seed: int) -> np.ndarray:
    """Draw one matrix whose rows are independent N(mean_row, row_cov).

    Computed as ``mean + Z Lᵀ`` with L the Cholesky factor of ``row_cov`` and Z
    standard normal, seeded deterministically.
    """
    mean = as_matrix(mean)
    row_cov = as_matrix(row_cov)
    if row_cov.shape[0] != row_cov.shape[1] or row_cov.shape[0] != mean.shape[1]:
        raise DimensionMismatch(
            f"row_cov {row_cov.shape} incompatible with mean {mean.shape}"
        )
    lower, _ = cholesky_factor(row_cov, 0.0)
    z = np.random.default_rng(rng_seed).standard_normal(mean.shape)
    return mean + z @ lower.T
