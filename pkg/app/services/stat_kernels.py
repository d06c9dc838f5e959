# stat_kernels.py
# Numerical primitives for the copula sampler and the panel simulator
# -----------------------------------------------------

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import linalg
from scipy.special import ndtr, ndtri
from scipy.stats import invwishart

from app.utils.errors import ConfigError, DegenerateColumnError, NumericalError

Rng = np.random.Generator
SpdMatrix = np.ndarray
SeedLike = Union[int, np.random.SeedSequence]

# interval lower bound (standardized) beyond which the exponential tail sampler takes over
TAIL_THRESHOLD = 5.0
_SYMMETRY_RTOL = 1e-12


# -------------------- Rng streams --------------------
def make_rng(seed: SeedLike) -> Rng:
    """Seeded generator; identical seeds give identical streams on every platform."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def spawn_seeds(seed: SeedLike, n: int) -> List[np.random.SeedSequence]:
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    return root.spawn(n)


def spawn_rngs(seed: SeedLike, n: int) -> List[Rng]:
    """Independent substreams derived from one root seed."""
    return [make_rng(child) for child in spawn_seeds(seed, n)]


def seed_ints(seed: SeedLike, n: int) -> List[int]:
    """n integer seeds derived from a root seed (for configs that store plain ints)."""
    return [int(child.generate_state(1)[0]) for child in spawn_seeds(seed, n)]


# -------------------- Normal CDF / quantile --------------------
def norm_cdf(x):
    return ndtr(x)


def norm_quantile(u):
    u_arr = np.asarray(u, dtype=np.float64)
    if np.any((u_arr <= 0.0) | (u_arr >= 1.0)) or np.any(np.isnan(u_arr)):
        raise ConfigError("norm_quantile requires u strictly inside (0, 1)")
    return ndtri(u)


# -------------------- Matrix checks --------------------
def check_spd(matrix: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Validate symmetry (1e-12 relative) and positive definiteness; returns the lower Cholesky factor."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ConfigError(f"{name} must be square, got shape {matrix.shape}")
    scale = max(np.abs(matrix).max(), 1.0)
    if np.abs(matrix - matrix.T).max() > _SYMMETRY_RTOL * scale:
        raise ConfigError(f"{name} is not symmetric")
    try:
        return linalg.cholesky(matrix, lower=True)
    except linalg.LinAlgError:
        raise ConfigError(f"{name} is not positive definite") from None


def is_spd(matrix: np.ndarray) -> bool:
    try:
        check_spd(matrix)
    except ConfigError:
        return False
    return True


def is_correlation_matrix(matrix: np.ndarray, atol: float = 1e-12) -> bool:
    matrix = np.asarray(matrix)
    return bool(np.allclose(np.diag(matrix), 1.0, rtol=0.0, atol=atol) and is_spd(matrix))


def cov_to_corr(sigma: np.ndarray) -> np.ndarray:
    """D^{-1/2} Σ D^{-1/2}, with an exactly unit, exactly symmetric result."""
    d = np.sqrt(np.diag(sigma))
    corr = sigma / np.outer(d, d)
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    return corr


# -------------------- Truncated normal --------------------
def _tail_draws(lo: np.ndarray, hi: np.ndarray, rng: Rng) -> np.ndarray:
    """Standard normal restricted to [lo, hi] with lo > TAIL_THRESHOLD.

    Exponential proposal shifted to lo for wide intervals, uniform proposal
    for narrow ones; both accept exactly.
    """
    out = np.empty(lo.shape)
    pending = np.arange(lo.size)
    while pending.size:
        a, b = lo[pending], hi[pending]
        narrow = a * (b - a) < 1.0
        z = np.empty(pending.size)
        alpha = 0.5 * (a + np.sqrt(a * a + 4.0))
        wide = ~narrow
        z[wide] = a[wide] + rng.exponential(1.0, size=int(wide.sum())) / alpha[wide]
        z[narrow] = a[narrow] + (b[narrow] - a[narrow]) * rng.random(int(narrow.sum()))
        log_accept = np.where(narrow, 0.5 * (a * a - z * z), -0.5 * (z - alpha) ** 2)
        accepted = (np.log(rng.random(pending.size)) <= log_accept) & (z < b)
        out[pending[accepted]] = z[accepted]
        pending = pending[~accepted]
    return out


def sample_truncnorm_array(mean, sd, lower, upper, rng: Rng) -> np.ndarray:
    """Vectorized draws from N(mean, sd²) restricted to (lower, upper).

    Fully unbounded cells take `mean + sd * rng.standard_normal()`. Bounded
    cells use the inverse CDF (on the survival side when the interval sits
    above the mean) unless the interval lies more than TAIL_THRESHOLD
    standard deviations out, where the exponential tail sampler is used.
    """
    mean, sd, lower, upper = np.broadcast_arrays(
        np.asarray(mean, dtype=np.float64),
        np.asarray(sd, dtype=np.float64),
        np.asarray(lower, dtype=np.float64),
        np.asarray(upper, dtype=np.float64),
    )
    shape = mean.shape
    mean, sd, lower, upper = (np.atleast_1d(x).ravel() for x in (mean, sd, lower, upper))
    if np.any(sd <= 0):
        raise ConfigError("Truncated normal requires sd > 0")
    if np.any(lower >= upper):
        raise ConfigError("Truncated normal requires lower < upper")

    a = (lower - mean) / sd
    b = (upper - mean) / sd
    free = np.isneginf(a) & np.isposinf(b)

    # reflect intervals lying below zero so every interval has hi > 0
    flip = b <= 0.0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    tail = (lo > TAIL_THRESHOLD) & ~free
    upper_side = (lo > 0.0) & ~tail & ~free
    lower_side = ~upper_side & ~tail & ~free

    z = np.empty(a.shape)
    if free.any():
        z[free] = rng.standard_normal(int(free.sum()))
    if lower_side.any():
        p_lo, p_hi = ndtr(lo[lower_side]), ndtr(hi[lower_side])
        u = rng.random(p_lo.size)
        z[lower_side] = ndtri(p_lo + u * (p_hi - p_lo))
    if upper_side.any():
        q_lo, q_hi = ndtr(-lo[upper_side]), ndtr(-hi[upper_side])
        u = rng.random(q_lo.size)
        z[upper_side] = -ndtri(q_lo - u * (q_lo - q_hi))
    if tail.any():
        z[tail] = _tail_draws(lo[tail], hi[tail], rng)

    z = np.where(flip & ~free, -z, z)
    value = mean + sd * z
    # u = 0 or rounding can land exactly on a bound; keep draws strictly inside
    bounded = ~free
    if bounded.any():
        value[bounded] = np.clip(
            value[bounded],
            np.nextafter(lower[bounded], np.inf),
            np.nextafter(upper[bounded], -np.inf),
        )
    return value.reshape(shape)


def sample_truncnorm(mean: float, sd: float, lower: float, upper: float, rng: Rng) -> float:
    return float(sample_truncnorm_array(mean, sd, lower, upper, rng).reshape(-1)[0])


# -------------------- Inverse-Wishart --------------------
def sample_inverse_wishart(df: float, scale: SpdMatrix, rng: Rng) -> SpdMatrix:
    """One draw from InverseWishart(df, scale) (Bartlett decomposition on the inverted scale)."""
    scale = np.atleast_2d(np.asarray(scale, dtype=np.float64))
    p = scale.shape[0]
    if not df > p - 1:
        raise ConfigError(f"Inverse-Wishart needs df > p - 1 (df={df}, p={p})")
    check_spd(scale, "inverse-Wishart scale")
    try:
        draw = invwishart.rvs(df=df, scale=scale, random_state=rng)
    except (np.linalg.LinAlgError, linalg.LinAlgError) as e:
        raise NumericalError(f"inverse-Wishart draw failed: {e}") from None
    draw = np.reshape(draw, (p, p))
    return 0.5 * (draw + draw.T)


# -------------------- Empirical marginals --------------------
class EmpiricalMarginal(BaseModel):
    """Tie-deduplicated support with cumulative proportions scaled by n/(n+1)."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    support: np.ndarray
    cumprob: np.ndarray
    n: int


def ecdf_build(observed: Sequence[float]) -> EmpiricalMarginal:
    values = np.asarray(observed, dtype=np.float64)
    values = values[~np.isnan(values)]
    support, counts = np.unique(values, return_counts=True)
    if support.size < 2:
        raise DegenerateColumnError("<marginal>", int(support.size))
    n = int(values.size)
    cumprob = np.cumsum(counts) / (n + 1.0)
    support.setflags(write=False)
    cumprob.setflags(write=False)
    return EmpiricalMarginal(support=support, cumprob=cumprob, n=n)


def ecdf_quantile(marginal: EmpiricalMarginal, u, interpolate: bool = False):
    """Smallest support value whose scaled cumulative proportion is >= u.

    Above the top proportion n/(n+1) the maximum is returned. With
    `interpolate`, values are linearly interpolated between support points
    instead (the result may leave the observed support).
    """
    u_arr = np.asarray(u, dtype=np.float64)
    if np.any((u_arr <= 0.0) | (u_arr >= 1.0)) or np.any(np.isnan(u_arr)):
        raise ConfigError("ecdf_quantile requires u strictly inside (0, 1)")
    if interpolate:
        out = np.interp(u_arr, marginal.cumprob, marginal.support)
    else:
        idx = np.searchsorted(marginal.cumprob, u_arr, side="left")
        out = marginal.support[np.minimum(idx, marginal.support.size - 1)]
    return out if np.ndim(u) else float(out)


def equal_tailed_interval(draws: np.ndarray, level: float, discrete: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Per-cell (lower, upper) of `draws` (frames × cells).

    Discrete cells use inverted_cdf quantiles so both bounds are drawn values.
    """
    if not 0.0 < level < 1.0:
        raise ConfigError(f"Credible level must lie in (0, 1), got {level}")
    tail = (1.0 - level) / 2.0
    method = "inverted_cdf" if discrete else "linear"
    lower, upper = np.quantile(draws, [tail, 1.0 - tail], axis=0, method=method)
    return lower, upper


# -------------------- Structured matrices --------------------
def kronecker(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.kron(np.atleast_2d(a), np.atleast_2d(b))


def ar1_toeplitz(periods: int, rho: float) -> SpdMatrix:
    """Entry (i, j) = rho^|i-j|."""
    if periods < 1:
        raise ConfigError(f"AR(1) Toeplitz needs T >= 1, got {periods}")
    if not abs(rho) < 1.0:
        raise ConfigError(f"AR(1) Toeplitz needs |rho| < 1, got {rho}")
    return linalg.toeplitz(float(rho) ** np.arange(periods))


def random_covariance(p: int, eigen_range: Tuple[float, float], rng: Rng) -> SpdMatrix:
    """Q diag(λ) Qᵀ with Q from a sign-corrected QR of a Gaussian matrix, λ ~ U(eigen_range)."""
    low, high = eigen_range
    if p < 1:
        raise ConfigError(f"Covariance dimension must be >= 1, got {p}")
    if not 0 < low <= high:
        raise ConfigError(f"Eigenvalue range must be positive and ordered, got {eigen_range}")
    q, r = np.linalg.qr(rng.standard_normal((p, p)))
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    eigenvalues = rng.uniform(low, high, size=p)
    sigma = (q * eigenvalues) @ q.T
    return 0.5 * (sigma + sigma.T)


def sample_mvn(mean: np.ndarray, cov: SpdMatrix, rng: Rng, size: Optional[int] = None) -> np.ndarray:
    """mean + L z with L the lower Cholesky factor of cov."""
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    if cov.shape != (mean.shape[-1], mean.shape[-1]):
        raise ConfigError(f"Mean of length {mean.shape[-1]} does not match covariance {cov.shape}")
    try:
        chol = linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        raise NumericalError("Cholesky failed: covariance is not positive definite") from None
    shape = (mean.shape[-1],) if size is None else (size, mean.shape[-1])
    z = rng.standard_normal(shape)
    return mean + z @ chol.T
