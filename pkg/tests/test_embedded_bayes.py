import numpy as np
import pytest
from scipy.special import ndtr

from app.models.schemas import ChainConfig, RegressionSpec
from app.models.table import ColumnKind, DataTable
from app.services.embedded_bayes import (
    PosteriorDraws,
    batch_means_se,
    conjugate_reference,
    gibbs_regress,
    summarize_posterior,
    summary_frame,
)
from app.services.evaluation import time_chain
from app.services.stat_kernels import make_rng
from app.utils.errors import ConfigError, DataError

SPEC = RegressionSpec(outcome="y", predictors=["x"])


def _regression_table(n=300, seed=21) -> DataTable:
    """y = 1 + 2x + e with an unrelated auxiliary column w."""
    rng = make_rng(seed)
    x = rng.standard_normal(n)
    w = rng.standard_normal(n)
    y = 1.0 + 2.0 * x + rng.standard_normal(n)
    return DataTable(columns=["y", "x", "w"], kinds=[ColumnKind.continuous()] * 3, values=np.column_stack([y, x, w]))


def _blank_x_from_w(table: DataTable, seed=5, cut=0.3) -> DataTable:
    values = np.array(table.values)
    prob = np.maximum(0.0, ndtr(values[:, 2]) - cut)
    hit = make_rng(seed).random(table.n_rows) < prob
    values[hit, 1] = np.nan
    return table.with_values(values)


def _constant_draws(n=10) -> PosteriorDraws:
    return PosteriorDraws(
        names=["(Intercept)", "x", "sigma2"],
        coefficients=np.tile([1.5, -2.0], (n, 1)),
        sigma2=np.full(n, 0.25),
        saved_iterations=np.arange(1, n + 1),
        seconds=0.0,
        config=ChainConfig(total_iterations=n, thin=1, burn_in=0),
    )


def test_saved_draw_count():
    assert ChainConfig(total_iterations=50000, thin=10, burn_in=1000).saved_frames == 4000


def test_chain_shapes_and_determinism():
    table = _blank_x_from_w(_regression_table(n=80))
    config = ChainConfig(total_iterations=60, thin=3, burn_in=5, seed=2)
    first, second = gibbs_regress(table, SPEC, config), gibbs_regress(table, SPEC, config)
    assert first.names == ["(Intercept)", "x", "sigma2"]
    assert first.n_draws == 15 and first.coefficients.shape == (15, 2)
    assert first.saved_iterations[0] == 18
    assert np.all(first.sigma2 > 0)
    assert np.array_equal(first.matrix(), second.matrix())


def test_complete_data_chain_matches_conjugate_posterior():
    table = _regression_table()
    draws = gibbs_regress(table, SPEC, ChainConfig(total_iterations=2000, thin=1, burn_in=100, seed=3))
    reference = conjugate_reference(table, SPEC)
    se = batch_means_se(draws.coefficients)
    assert np.all(np.abs(draws.coefficients.mean(axis=0) - reference.mean) <= 3.0 * se)
    assert draws.coefficients.std(axis=0, ddof=1) == pytest.approx(reference.sd, rel=0.1)
    assert draws.sigma2.mean() == pytest.approx(reference.sigma2_mean, rel=0.05)


def _orthogonal_regression_table(n=500, seed=21) -> DataTable:
    """y = 1 + 2x + e with e orthogonal to [1, x, w]: the complete-data fit is exactly (1, 2)."""
    rng = make_rng(seed)
    x = rng.standard_normal(n)
    w = rng.standard_normal(n)
    design = np.column_stack([np.ones(n), x, w])
    e = rng.standard_normal(n)
    e -= design @ np.linalg.lstsq(design, e, rcond=None)[0]
    e /= e.std()
    y = 1.0 + 2.0 * x + e
    return DataTable(columns=["y", "x", "w"], kinds=[ColumnKind.continuous()] * 3, values=np.column_stack([y, x, w]))


@pytest.mark.slow
def test_twenty_percent_mar_predictor_keeps_the_slope_and_widens_its_interval():
    complete = _orthogonal_regression_table()
    # (1 - cut)² / 2 = 0.2 expected MISSING share
    masked = _blank_x_from_w(complete, cut=1.0 - np.sqrt(0.4))
    assert 0.13 < masked.mask[:, 1].mean() < 0.27

    config = ChainConfig(total_iterations=10_000, thin=5, burn_in=1000, seed=4)
    full = summarize_posterior(gibbs_regress(complete, SPEC, config))
    draws, seconds = time_chain(lambda: gibbs_regress(masked, SPEC, config))
    partial = summarize_posterior(draws)

    slope_full, slope_partial = full[1], partial[1]
    assert slope_partial.parameter == "x"
    assert abs(slope_partial.mean - 2.0) < 2.0 * slope_partial.sd
    assert slope_partial.upper - slope_partial.lower >= slope_full.upper - slope_full.lower
    assert seconds < 300.0


def test_summary_of_constant_draws():
    rows = summarize_posterior(_constant_draws())
    assert [row.parameter for row in rows] == ["(Intercept)", "x", "sigma2"]
    assert rows[0].mean == 1.5 and rows[0].sd == 0.0
    assert rows[1].lower == rows[1].upper == -2.0
    assert rows[2].mean == pytest.approx(0.25)
    frame = summary_frame(rows)
    assert list(frame.columns) == ["parameter", "mean", "sd", "lower", "upper", "level"]


def test_summary_interval_matches_sorted_draws():
    rng = make_rng(12)
    n = 101
    draws = PosteriorDraws(
        names=["x", "sigma2"],
        coefficients=rng.standard_normal((n, 1)),
        sigma2=rng.uniform(0.5, 1.5, n),
        saved_iterations=np.arange(1, n + 1),
        seconds=0.0,
        config=ChainConfig(total_iterations=n, thin=1, burn_in=0),
    )
    row = summarize_posterior(draws, level=0.9)[0]
    ordered = np.sort(draws.coefficients[:, 0])
    assert row.lower == pytest.approx(ordered[5], abs=1e-9)
    assert row.upper == pytest.approx(ordered[95], abs=1e-9)
    assert row.sd == pytest.approx(np.std(ordered, ddof=1))
    with pytest.raises(ConfigError):
        summarize_posterior(draws, level=0.0)


def test_long_frame_layout():
    frame = _constant_draws(n=4).to_long_frame()
    assert list(frame.columns) == ["iteration", "parameter", "value"]
    assert len(frame) == 12
    assert frame["parameter"].tolist()[:3] == ["(Intercept)", "x", "sigma2"]
    assert frame["iteration"].tolist()[:4] == [1, 1, 1, 2]


def test_unknown_outcome_is_config_error():
    with pytest.raises(ConfigError):
        gibbs_regress(
            _regression_table(n=40),
            RegressionSpec(outcome="nope", predictors=["x"]),
            ChainConfig(total_iterations=30, thin=3, burn_in=5),
        )


def test_batch_means_se():
    assert np.allclose(batch_means_se(np.ones(100)), 0.0)
    samples = make_rng(1).standard_normal(4000)
    assert batch_means_se(samples)[0] == pytest.approx(1.0 / np.sqrt(4000), rel=0.5)
    with pytest.raises(ConfigError):
        batch_means_se(np.ones(10))


def test_conjugate_reference_needs_complete_data():
    with pytest.raises(DataError):
        conjugate_reference(_blank_x_from_w(_regression_table()), SPEC)
