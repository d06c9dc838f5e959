# copula_sampler.py
# Extended rank likelihood Gaussian copula Gibbs sampler
# -----------------------------------------------------
# Latent scores Z (n×p) only have to respect the ordering of each column's
# observed values; C is refreshed from an inverse-Wishart draw rescaled to a
# correlation matrix. Imputations map Z through the empirical marginals.

from __future__ import annotations

import time
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict
from scipy import linalg
from scipy.special import ndtr, ndtri
from scipy.stats import rankdata

from app.config import settings
from app.models.schemas import ChainConfig
from app.models.table import ColumnRanks, DataTable
from app.services.data_model import compute_ranks
from app.services.stat_kernels import (
    EmpiricalMarginal,
    Rng,
    cov_to_corr,
    ecdf_build,
    ecdf_quantile,
    equal_tailed_interval,
    make_rng,
    sample_inverse_wishart,
    sample_truncnorm_array,
)
from app.utils.errors import ConditioningError, ConfigError, DataError, NumericalError

ProgressSink = Callable[[int, int], None]

_U_MIN = np.finfo(np.float64).tiny
_U_MAX = np.nextafter(1.0, 0.0)


# -------------------- Column layout --------------------
class LevelBlock(BaseModel):
    """Observed cells of one level parity; rows ascending."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    rows: np.ndarray
    levels: np.ndarray


class ColumnLayout(BaseModel):
    """Per-column rank bookkeeping computed once per chain."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    ranks: ColumnRanks
    marginal: EmpiricalMarginal
    sorted_rows: np.ndarray     # observed rows ordered by (level, row)
    level_starts: np.ndarray    # offset of each level inside sorted_rows
    blocks: Tuple[LevelBlock, LevelBlock]
    missing_rows: np.ndarray
    continuous: bool = True

    @property
    def n_levels(self) -> int:
        return self.ranks.n_levels


def build_layout(table: DataTable, j: int) -> ColumnLayout:
    ranks = compute_ranks(table, j)
    levels = ranks.levels
    obs_rows = np.nonzero(levels >= 0)[0]
    obs_levels = levels[obs_rows]
    order = np.lexsort((obs_rows, obs_levels))
    sorted_rows = obs_rows[order]
    level_starts = np.searchsorted(obs_levels[order], np.arange(ranks.n_levels))
    blocks = tuple(
        LevelBlock(rows=obs_rows[obs_levels % 2 == parity], levels=obs_levels[obs_levels % 2 == parity])
        for parity in (0, 1)
    )
    return ColumnLayout(
        ranks=ranks,
        marginal=ecdf_build(table.values[obs_rows, j]),
        sorted_rows=sorted_rows,
        level_starts=level_starts,
        blocks=blocks,
        missing_rows=np.nonzero(levels < 0)[0],
        continuous=table.kinds[j].is_continuous,
    )


# -------------------- State --------------------
class LatentState(BaseModel):
    """Latent Gaussian scores Z, the current correlation draw C and the iteration counter."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    z: np.ndarray
    corr: np.ndarray
    iteration: int = 0
    layouts: List[ColumnLayout]

    def rank_consistent(self) -> bool:
        """Every observed cell lies strictly above all cells of lower levels in its column."""
        for j, layout in enumerate(self.layouts):
            zs = self.z[layout.sorted_rows, j]
            lev_max = np.maximum.reduceat(zs, layout.level_starts)
            lev_min = np.minimum.reduceat(zs, layout.level_starts)
            if np.any(lev_max[:-1] >= lev_min[1:]):
                return False
        return True


def resolve_prior(config: ChainConfig, p: int) -> Tuple[float, np.ndarray]:
    """(ν₀, S₀) with defaults ν₀ = p + 2 and S₀ = ν₀·I."""
    df = float(p + 2) if config.prior_df is None else float(config.prior_df)
    if not df > p + 1:
        raise ConfigError(f"Prior degrees of freedom must exceed p + 1 = {p + 1}, got {df}")
    if config.prior_scale is None:
        scale = df * np.eye(p)
    else:
        scale = np.asarray(config.prior_scale, dtype=np.float64)
        if scale.shape != (p, p):
            raise ConfigError(f"Prior scale must be {p}×{p}, got {scale.shape}")
    return df, scale


def init_state(table: DataTable, config: ChainConfig) -> LatentState:
    """Normal scores of scaled mid-ranks for observed cells, 0 for MISSING cells, C = I."""
    resolve_prior(config, table.n_cols)
    layouts = [build_layout(table, j) for j in range(table.n_cols)]
    z = np.zeros(table.values.shape)
    for j, layout in enumerate(layouts):
        observed = layout.ranks.observed
        mid_ranks = rankdata(table.values[observed, j], method="average")
        z[observed, j] = ndtri(mid_ranks / (observed.sum() + 1.0))
    return LatentState(z=z, corr=np.eye(table.n_cols), iteration=0, layouts=layouts)


# -------------------- Conditionals --------------------
def conditional_params(
    corr: np.ndarray, j: int, threshold: Optional[float] = None
) -> Tuple[np.ndarray, float]:
    """Regression of column j on the others under N(0, C).

    Returns (C₋ⱼ₋ⱼ⁻¹ C₋ⱼⱼ, 1 − Cⱼ₋ⱼ C₋ⱼ₋ⱼ⁻¹ C₋ⱼⱼ).
    """
    threshold = settings.condition_threshold if threshold is None else threshold
    p = corr.shape[0]
    if p == 1:
        return np.zeros(0), 1.0
    others = np.delete(np.arange(p), j)
    c_oo = corr[np.ix_(others, others)]
    c_oj = corr[others, j]
    if np.linalg.cond(c_oo) > threshold:
        raise ConditioningError(f"C without column {j} has condition number above {threshold:g}")
    coef = linalg.solve(c_oo, c_oj, assume_a="pos")
    residual = 1.0 - float(c_oj @ coef)
    if residual <= 0.0:
        raise ConditioningError(f"Non-positive residual variance for column {j}")
    return coef, min(residual, 1.0)


def _sweep_params(corr: np.ndarray, threshold: float) -> Tuple[np.ndarray, np.ndarray]:
    """All columns' conditional coefficients (as a p×p matrix, column j with a zero
    at j) and residual sds, read off the precision matrix in one factorization."""
    if np.linalg.cond(corr) > threshold:
        raise ConditioningError(f"C has condition number above {threshold:g}")
    try:
        precision = linalg.cho_solve(linalg.cho_factor(corr, lower=True), np.eye(corr.shape[0]))
    except linalg.LinAlgError:
        raise ConditioningError("C is not positive definite") from None
    diag = np.diag(precision)
    coef = -precision / diag[np.newaxis, :]
    np.fill_diagonal(coef, 0.0)
    return coef, np.sqrt(1.0 / diag)


def sweep_latent(
    state: LatentState,
    table: DataTable,
    rng: Rng,
    threshold: Optional[float] = None,
    ridge: Optional[float] = None,
) -> LatentState:
    """Resample every latent cell once from its univariate conditional.

    Columns in order; within a column the even rank levels, then the odd
    rank levels (rows ascending inside each block), then MISSING cells.
    Observed cells are truncated between the neighbouring levels' latent
    values, which keeps rank consistency; MISSING cells are untruncated.
    """
    threshold = settings.condition_threshold if threshold is None else threshold
    ridge = settings.ridge if ridge is None else ridge
    if state.z.shape != table.values.shape:
        raise DataError(f"State shape {state.z.shape} does not match table {table.values.shape}")
    try:
        coef, sd = _sweep_params(state.corr, threshold)
    except ConditioningError:
        logger.debug(f"Near-singular C at iteration {state.iteration}; adding ridge {ridge:g}")
        state.corr = cov_to_corr(state.corr + ridge * np.eye(state.corr.shape[0]))
        coef, sd = _sweep_params(state.corr, threshold)

    z = state.z
    for j, layout in enumerate(state.layouts):
        mu = z @ coef[:, j]
        top = layout.n_levels - 1
        for block in layout.blocks:
            if block.rows.size == 0:
                continue
            zs = z[layout.sorted_rows, j]
            lev_max = np.maximum.reduceat(zs, layout.level_starts)
            lev_min = np.minimum.reduceat(zs, layout.level_starts)
            lev = block.levels
            lower = np.where(lev > 0, lev_max[np.maximum(lev - 1, 0)], -np.inf)
            upper = np.where(lev < top, lev_min[np.minimum(lev + 1, top)], np.inf)
            try:
                z[block.rows, j] = sample_truncnorm_array(mu[block.rows], sd[j], lower, upper, rng)
            except ConfigError as e:
                raise NumericalError(f"latent update of column {j} failed: {e}") from None
        missing = layout.missing_rows
        if missing.size:
            z[missing, j] = mu[missing] + sd[j] * rng.standard_normal(missing.size)
    state.iteration += 1
    return state


def update_correlation(state: LatentState, config: ChainConfig, rng: Rng) -> LatentState:
    """Σ ~ InverseWishart(ν₀ + n, S₀ + ZᵀZ), then C = D^{-1/2} Σ D^{-1/2}."""
    n, p = state.z.shape
    df, scale = resolve_prior(config, p)
    try:
        sigma = sample_inverse_wishart(df + n, scale + state.z.T @ state.z, rng)
    except ConfigError as e:
        raise NumericalError(f"correlation update failed: {e}") from None
    state.corr = cov_to_corr(sigma)
    return state


# -------------------- Imputation --------------------
def impute_missing(state: LatentState, interpolate: bool = False) -> np.ndarray:
    """Imputed values of all MISSING cells, column-major with rows ascending.

    `interpolate` applies to continuous columns only; discrete columns keep the
    step map so imputations stay on the observed support.
    """
    parts = []
    for j, layout in enumerate(state.layouts):
        rows = layout.missing_rows
        if rows.size:
            u = np.clip(ndtr(state.z[rows, j]), _U_MIN, _U_MAX)
            smooth = interpolate and layout.continuous
            parts.append(np.asarray(ecdf_quantile(layout.marginal, u, interpolate=smooth)))
    return np.concatenate(parts) if parts else np.zeros(0)


def impute_frame(state: LatentState, table: DataTable, interpolate: bool = False) -> DataTable:
    """Completed copy of `table`: observed cells verbatim, MISSING cells from the marginals."""
    rows, cols = table.missing_cells()
    values = np.array(table.values)
    values[rows, cols] = impute_missing(state, interpolate=interpolate)
    return table.with_values(values)


# -------------------- Chain --------------------
class ChainResult(BaseModel):
    """Saved imputation draws (MISSING cells only), C draws and timing of one run."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    table: DataTable
    rows: np.ndarray
    cols: np.ndarray
    draws: np.ndarray           # frames × missing cells
    corr_draws: np.ndarray      # frames × p × p
    saved_iterations: np.ndarray
    seconds: float
    config: ChainConfig

    @property
    def n_frames(self) -> int:
        return int(self.draws.shape[0])

    @property
    def columns(self) -> List[str]:
        return list(self.table.columns)

    def frame(self, k: int) -> DataTable:
        values = np.array(self.table.values)
        values[self.rows, self.cols] = self.draws[k]
        return self.table.with_values(values)

    @property
    def frames(self) -> List[DataTable]:
        return [self.frame(k) for k in range(self.n_frames)]

    def cell_draws(self, row: int, col: int) -> np.ndarray:
        hit = np.nonzero((self.rows == row) & (self.cols == col))[0]
        if hit.size == 0:
            raise DataError(f"Cell ({row}, {col}) was not imputed")
        return self.draws[:, hit[0]]

    def posterior_mean_corr(self) -> np.ndarray:
        return self.corr_draws.mean(axis=0)

    def restrict(self, names: Sequence[str]) -> "ChainResult":
        """Same run viewed on a subset of columns (e.g. without lag columns)."""
        idx = [self.table.index_of(name) for name in names]
        remap = np.full(self.table.n_cols, -1)
        remap[idx] = np.arange(len(idx))
        keep = remap[self.cols] >= 0
        return ChainResult(
            table=self.table.select(names),
            rows=self.rows[keep],
            cols=remap[self.cols[keep]],
            draws=self.draws[:, keep],
            corr_draws=self.corr_draws[:, idx][:, :, idx],
            saved_iterations=self.saved_iterations,
            seconds=self.seconds,
            config=self.config,
        )


def run_chain(table: DataTable, config: ChainConfig, progress: Optional[ProgressSink] = None) -> ChainResult:
    """Alternate sweep_latent and update_correlation for config.total_iterations.

    Every thin-th iteration is saved; the first burn_in saved frames are
    dropped, leaving floor(total/thin) − burn_in frames.
    """
    rng = make_rng(config.seed)
    state = init_state(table, config)
    rows, cols = table.missing_cells()
    draws, corr_draws, saved_iterations = [], [], []
    saved = 0
    logger.debug(
        f"Chain start: {table.n_rows}×{table.n_cols}, {rows.size} MISSING cells, "
        f"iters={config.total_iterations} thin={config.thin} burn-in={config.burn_in} seed={config.seed}"
    )

    t_start = time.perf_counter()
    for iteration in range(1, config.total_iterations + 1):
        try:
            sweep_latent(state, table, rng)
            update_correlation(state, config, rng)
        except NumericalError as e:
            raise NumericalError(str(e), iteration=iteration) from e
        if iteration % config.thin == 0:
            saved += 1
            if saved > config.burn_in:
                draws.append(impute_missing(state))
                corr_draws.append(state.corr.copy())
                saved_iterations.append(iteration)
        if progress is not None:
            progress(iteration, config.total_iterations)
    seconds = time.perf_counter() - t_start

    logger.debug(f"Chain finished in {seconds:.3f}s with {len(draws)} saved frames")
    return ChainResult(
        table=table,
        rows=rows,
        cols=cols,
        draws=np.vstack(draws).reshape(len(draws), rows.size),
        corr_draws=np.stack(corr_draws),
        saved_iterations=np.asarray(saved_iterations, dtype=np.int64),
        seconds=seconds,
        config=config,
    )


# -------------------- Summaries --------------------
class ImputationSummary(BaseModel):
    """Per MISSING cell: point (mean or mode) and equal-tailed interval."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    rows: np.ndarray
    cols: np.ndarray
    columns: List[str]
    point: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "row": self.rows,
                "column": [self.columns[c] for c in self.cols],
                "point": self.point,
                "lower": self.lower,
                "upper": self.upper,
            }
        )


def _mode(draws: np.ndarray, support: np.ndarray) -> np.ndarray:
    """Most frequent value per column of `draws`; ties go to the smallest value."""
    counts = np.stack([(draws == s).sum(axis=0) for s in support])
    return support[np.argmax(counts, axis=0)]


def summarize(chain: ChainResult, level: float = 0.95, round_discrete: bool = False) -> ImputationSummary:
    """Posterior mean (continuous) or mode (ordinal/binary) with an equal-tailed interval.

    With `round_discrete`, discrete cells take the posterior mean snapped to
    the nearest observed level instead of the mode.
    """
    if not 0.0 < level < 1.0:
        raise ConfigError(f"Credible level must lie in (0, 1), got {level}")
    if chain.n_frames < 2:
        raise ConfigError("At least 2 saved frames are needed for a summary")
    point = np.empty(chain.rows.size)
    lower = np.empty(chain.rows.size)
    upper = np.empty(chain.rows.size)
    for j, kind in enumerate(chain.table.kinds):
        idx = np.nonzero(chain.cols == j)[0]
        if idx.size == 0:
            continue
        draws = chain.draws[:, idx]
        if kind.is_discrete:
            column = chain.table.values[:, j]
            support = np.unique(column[~np.isnan(column)])
            if round_discrete:
                means = draws.mean(axis=0)
                nearest = np.abs(means[:, np.newaxis] - support[np.newaxis, :]).argmin(axis=1)
                point[idx] = support[nearest]
            else:
                point[idx] = _mode(draws, support)
            lower[idx], upper[idx] = equal_tailed_interval(draws, level, discrete=True)
        else:
            point[idx] = draws.mean(axis=0)
            lo, hi = equal_tailed_interval(draws, level)
            # a heavy tail can pull the mean past an equal-tailed bound
            lower[idx], upper[idx] = np.minimum(lo, point[idx]), np.maximum(hi, point[idx])
    return ImputationSummary(
        rows=chain.rows,
        cols=chain.cols,
        columns=chain.columns,
        point=point,
        lower=lower,
        upper=upper,
        level=level,
    )
