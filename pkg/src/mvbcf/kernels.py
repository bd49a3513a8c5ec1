"""Dense linear-algebra and distribution-sampling primitives.

Everything here is a pure function over an explicit ``numpy.random.Generator``
so callers stay reproducible and can run concurrently with independent
generators.
"""

from __future__ import annotations

import numpy as np

from .errors import DecompositionError

# Relative diagonal jitter applied before retrying a failed Cholesky.
CHOL_JITTER = 1e-10


def cholesky_with_jitter(mat: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor of ``mat``, retrying once with diagonal jitter.

    The jitter is ``CHOL_JITTER * trace / dim`` added to the diagonal, which
    rescues covariances that are only just singular (for example leaf
    posteriors with a tiny prior scale).  Raises :class:`DecompositionError`
    naming the offending matrix if the retry also fails.
    """
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        pass
    dim = mat.shape[-1]
    bump = CHOL_JITTER * np.trace(mat) / dim
    if bump <= 0:
        bump = CHOL_JITTER
    try:
        return np.linalg.cholesky(mat + bump * np.eye(dim))
    except np.linalg.LinAlgError:
        raise DecompositionError(
            f"{name} is not positive definite (after jitter {bump:.3e}): {mat!r}"
        ) from None


def sample_mvn(mean: np.ndarray, cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw from N(mean, cov).

    A zero covariance is treated as degenerate and returns the mean.  Consumes
    exactly ``len(mean)`` standard normals, so replaying a seeded generator
    reproduces the draw bit for bit.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if mean.shape[0] != cov.shape[0] or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"dimension mismatch: mean {mean.shape}, cov {cov.shape}")
    if not cov.any():
        return mean.copy()
    chol = cholesky_with_jitter(cov, name="mvn covariance")
    return mean + chol @ rng.standard_normal(mean.shape[0])


def sample_gamma(shape: float, rate: float, rng: np.random.Generator) -> float:
    """Gamma draw with mean ``shape / rate`` (shape-rate parameterization)."""
    if shape <= 0 or rate <= 0:
        raise ValueError(f"gamma parameters must be positive, got shape={shape}, rate={rate}")
    return rate ** -1 * rng.standard_gamma(shape)


def sample_inv_wishart(df: float, scale: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-Wishart draw via the Bartlett decomposition of the Wishart.

    ``df`` must exceed ``dim - 1``.  The draw has mean ``scale / (df - dim - 1)``
    when that exists and is always symmetric positive definite.
    """
    scale = np.asarray(scale, dtype=float)
    dim = scale.shape[0]
    if df <= dim - 1:
        raise ValueError(f"inverse-Wishart needs df > dim - 1, got df={df}, dim={dim}")
    chol_scale = cholesky_with_jitter(scale, name="inverse-Wishart scale")
    # Bartlett factor A of a Wishart(df, scale^-1) draw: W = F A A' F' with
    # F F' = scale^-1, i.e. F = (L^-1)' for L the factor of the scale.
    factor = np.linalg.inv(chol_scale).T
    bartlett = np.zeros((dim, dim))
    for i in range(dim):
        bartlett[i, i] = np.sqrt(2.0 * rng.standard_gamma((df - i) / 2.0))
    idx = np.tril_indices(dim, k=-1)
    if idx[0].size:
        bartlett[idx] = rng.standard_normal(idx[0].size)
    root = factor @ bartlett  # W = root @ root.T
    # Invert through the triangular system rather than forming W first.
    inv_root = np.linalg.inv(root)
    draw = inv_root.T @ inv_root
    return 0.5 * (draw + draw.T)


def crps_empirical(draws: np.ndarray, observed: float) -> float:
    """Empirical CRPS of a sample of scalar draws against one observation.

    Uses the pairwise estimator ``mean|X - y| - 0.5 * mean|X - X'|`` where the
    second mean runs over all ordered pairs.  The pair term is evaluated
    exactly via the sorted identity, so the value equals the literal O(m^2)
    double sum.
    """
    draws = np.asarray(draws, dtype=float).ravel()
    m = draws.size
    if m == 0:
        raise ValueError("crps_empirical needs a nonempty sample")
    term_obs = np.abs(draws - observed).mean()
    srt = np.sort(draws)
    # sum_{i,j} |x_i - x_j| = 2 * sum_k x_(k) * (2k - m + 1), k zero-based
    weights = 2.0 * np.arange(m) - m + 1.0
    pair_sum = 2.0 * np.dot(srt, weights)
    return float(term_obs - 0.5 * pair_sum / (m * m))
