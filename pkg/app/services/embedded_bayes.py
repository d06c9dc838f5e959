# embedded_bayes.py
# Bayesian linear regression with imputation inside the chain
# -----------------------------------------------------
# Each iteration advances the copula state one sweep, fills the MISSING
# cells from it, then draws β | σ² (normal) and σ² | β (inverse gamma)
# on the completed data.

from __future__ import annotations

import time
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict
from scipy import linalg

from app.models.schemas import ChainConfig, PosteriorSummaryRow, RegressionSpec
from app.models.table import DataTable
from app.services.copula_sampler import (
    ProgressSink,
    impute_missing,
    init_state,
    sweep_latent,
    update_correlation,
)
from app.services.stat_kernels import Rng, make_rng
from app.utils.errors import ConfigError, DataError, NumericalError


class PosteriorDraws(BaseModel):
    """Saved coefficient and error-variance draws of one regression chain."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    names: List[str]             # coefficient names followed by "sigma2"
    coefficients: np.ndarray     # draws × k
    sigma2: np.ndarray           # draws
    saved_iterations: np.ndarray
    seconds: float
    config: ChainConfig

    @property
    def n_draws(self) -> int:
        return int(self.sigma2.size)

    def matrix(self) -> np.ndarray:
        """draws × (k + 1), columns ordered as `names`."""
        return np.column_stack([self.coefficients, self.sigma2])

    def to_long_frame(self) -> pd.DataFrame:
        matrix = self.matrix()
        return pd.DataFrame(
            {
                "iteration": np.repeat(self.saved_iterations, len(self.names)),
                "parameter": np.tile(self.names, self.n_draws),
                "value": matrix.ravel(),
            }
        )


def _design(values: np.ndarray, outcome: int, predictors: List[int], intercept: bool) -> Tuple[np.ndarray, np.ndarray]:
    x = values[:, predictors]
    if intercept:
        x = np.column_stack([np.ones(values.shape[0]), x])
    return x, values[:, outcome]


def _prior(spec: RegressionSpec, k: int) -> Tuple[np.ndarray, np.ndarray]:
    mean = np.zeros(k) if spec.prior_mean is None else np.asarray(spec.prior_mean, dtype=np.float64)
    return mean, spec.prior_precision * np.eye(k)


def _resolve_columns(table: DataTable, spec: RegressionSpec) -> Tuple[int, List[int]]:
    return table.index_of(spec.outcome), [table.index_of(name) for name in spec.predictors]


def draw_coefficients(
    x: np.ndarray, y: np.ndarray, sigma2: float, prior_mean: np.ndarray, prior_precision: np.ndarray, rng: Rng
) -> np.ndarray:
    """β | σ², y ~ N(Q⁻¹(Λ₀m₀ + Xᵀy/σ²), Q⁻¹) with Q = Λ₀ + XᵀX/σ²."""
    precision = prior_precision + (x.T @ x) / sigma2
    try:
        chol = linalg.cholesky(precision, lower=True)
    except linalg.LinAlgError:
        raise NumericalError("Posterior coefficient precision is not positive definite") from None
    rhs = prior_precision @ prior_mean + (x.T @ y) / sigma2
    mean = linalg.cho_solve((chol, True), rhs)
    return mean + linalg.solve_triangular(chol.T, rng.standard_normal(mean.size), lower=False)


def draw_error_variance(x: np.ndarray, y: np.ndarray, beta: np.ndarray, shape: float, scale: float, rng: Rng) -> float:
    """σ² | β, y ~ InverseGamma(a₀ + n/2, b₀ + RSS/2)."""
    residual = y - x @ beta
    rate = scale + 0.5 * float(residual @ residual)
    return 1.0 / rng.gamma(shape + 0.5 * y.size, 1.0 / rate)


def gibbs_regress(
    table: DataTable, spec: RegressionSpec, config: ChainConfig, progress: Optional[ProgressSink] = None
) -> PosteriorDraws:
    """Regression chain sharing one copula state for point-of-need imputation.

    Saves every thin-th iteration after discarding `burn_in` saved draws.
    The outcome takes part in the copula like any other column.
    """
    outcome, predictors = _resolve_columns(table, spec)
    k = len(predictors) + int(spec.intercept)
    prior_mean, prior_precision = _prior(spec, k)
    rng = make_rng(config.seed)
    state = init_state(table, config)
    rows, cols = table.missing_cells()
    values = np.array(table.values)
    values[rows, cols] = impute_missing(state)
    sigma2 = float(np.var(values[:, outcome])) or 1.0

    coefficients, variances, saved_iterations = [], [], []
    saved = 0
    t_start = time.perf_counter()
    for iteration in range(1, config.total_iterations + 1):
        try:
            sweep_latent(state, table, rng)
            update_correlation(state, config, rng)
            values[rows, cols] = impute_missing(state)
            x, y = _design(values, outcome, predictors, spec.intercept)
            beta = draw_coefficients(x, y, sigma2, prior_mean, prior_precision, rng)
            sigma2 = draw_error_variance(x, y, beta, spec.shape, spec.scale, rng)
        except NumericalError as e:
            raise NumericalError(str(e), iteration=iteration) from e
        if iteration % config.thin == 0:
            saved += 1
            if saved > config.burn_in:
                coefficients.append(beta)
                variances.append(sigma2)
                saved_iterations.append(iteration)
        if progress is not None:
            progress(iteration, config.total_iterations)
    seconds = time.perf_counter() - t_start

    logger.debug(f"Regression chain finished in {seconds:.3f}s with {len(variances)} draws")
    return PosteriorDraws(
        names=spec.parameter_names,
        coefficients=np.vstack(coefficients),
        sigma2=np.asarray(variances),
        saved_iterations=np.asarray(saved_iterations, dtype=np.int64),
        seconds=seconds,
        config=config,
    )


def summarize_posterior(draws: PosteriorDraws, level: float = 0.95) -> List[PosteriorSummaryRow]:
    """Mean, sd and equal-tailed interval per coefficient and for σ²."""
    if not 0.0 < level < 1.0:
        raise ConfigError(f"Credible level must lie in (0, 1), got {level}")
    if draws.n_draws < 2:
        raise ConfigError("At least 2 posterior draws are needed for a summary")
    matrix = draws.matrix()
    tail = (1.0 - level) / 2.0
    lower, upper = np.quantile(matrix, [tail, 1.0 - tail], axis=0)
    means = matrix.mean(axis=0)
    sds = matrix.std(axis=0, ddof=1)
    return [
        PosteriorSummaryRow(
            parameter=name, mean=float(means[i]), sd=float(sds[i]),
            lower=float(lower[i]), upper=float(upper[i]), level=level,
        )
        for i, name in enumerate(draws.names)
    ]


def summary_frame(rows: List[PosteriorSummaryRow]) -> pd.DataFrame:
    return pd.DataFrame([row.model_dump() for row in rows])


def batch_means_se(samples: np.ndarray, batches: int = 20) -> np.ndarray:
    """Monte-Carlo standard error of the mean by non-overlapping batch means (per column)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, np.newaxis]
    size = samples.shape[0] // batches
    if size < 1:
        raise ConfigError(f"Need at least {batches} draws for {batches} batches")
    means = samples[: size * batches].reshape(batches, size, -1).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(batches)


class ReferencePosterior(BaseModel):
    """Closed-form normal/inverse-gamma posterior moments for complete data."""

    names: List[str]
    mean: List[float]
    sd: List[float]
    sigma2_mean: float


def conjugate_reference(table: DataTable, spec: RegressionSpec) -> ReferencePosterior:
    """Conjugate posterior with β | σ² ~ N(m₀, σ² Λ₀⁻¹), σ² ~ IG(a₀, b₀).

    With the default vague prior this agrees with the chain to Monte-Carlo
    error on complete data.
    """
    if table.mask.any():
        raise DataError("conjugate_reference needs a table without MISSING cells")
    outcome, predictors = _resolve_columns(table, spec)
    x, y = _design(np.asarray(table.values), outcome, predictors, spec.intercept)
    n, k = x.shape
    prior_mean, prior_precision = _prior(spec, k)
    precision = prior_precision + x.T @ x
    try:
        factor = linalg.cho_factor(precision)
    except linalg.LinAlgError:
        raise NumericalError("Posterior precision is not positive definite") from None
    mean = linalg.cho_solve(factor, prior_precision @ prior_mean + x.T @ y)
    shape = spec.shape + 0.5 * n
    rate = spec.scale + 0.5 * float(y @ y + prior_mean @ prior_precision @ prior_mean - mean @ precision @ mean)
    sigma2_mean = rate / (shape - 1.0)
    covariance = sigma2_mean * linalg.cho_solve(factor, np.eye(k))
    return ReferencePosterior(
        names=spec.parameter_names[:-1],
        mean=mean.tolist(),
        sd=np.sqrt(np.diag(covariance)).tolist(),
        sigma2_mean=sigma2_mean,
    )
