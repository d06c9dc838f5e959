from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Dict, List, Literal, Optional, Tuple
from datetime import datetime

import pandas as pd

# === Chain Configuration ===
class ChainConfig(BaseModel):
    """Gibbs chain length, thinning, burn-in, seed and copula prior."""
    total_iterations: int = Field(3000, ge=1, description="Total Gibbs iterations")
    thin: int = Field(3, ge=1, description="Save every thin-th iteration")
    burn_in: int = Field(500, ge=0, description="Number of saved frames discarded")
    seed: int = Field(0, ge=0, description="Root seed of the chain's Rng")
    prior_df: Optional[float] = Field(None, description="ν₀; default p + 2")
    prior_scale: Optional[List[List[float]]] = Field(None, description="S₀; default ν₀·I")

    @model_validator(mode="after")
    def _frames_remain(self) -> "ChainConfig":
        if self.total_iterations // self.thin - self.burn_in < 1:
            raise ValueError(
                f"total/thin - burn-in must be >= 1 (got {self.total_iterations}//{self.thin} - {self.burn_in})"
            )
        return self

    @property
    def saved_frames(self) -> int:
        return self.total_iterations // self.thin - self.burn_in

# === Simulation Configuration ===
class SimulationConfig(BaseModel):
    """Synthetic time-series cross-section generator."""
    n_units: int = Field(120, ge=2)
    n_periods: int = Field(20, ge=2, description="T; the study uses 20..70")
    rho: float = Field(0.75, gt=-1.0, lt=1.0, description="AR(1) autocorrelation factor")
    mean_ranges: List[Tuple[float, float]] = Field(
        default_factory=lambda: [(0.0, 1.0), (0.0, 100.0), (-20.0, 20.0), (-500.0, 500.0), (0.0, 1.0)],
        description="Uniform bounds of the unit-specific means, one per variable",
    )
    eigen_range: Tuple[float, float] = Field((0.1, 10.0), description="Eigenvalue range of the random covariance")
    binary_source: int = Field(0, ge=0, description="Variable whose normal CDF drives the binary variable")
    binary_column: Optional[int] = Field(None, description="Index of the binary variable; default last")
    seed: int = Field(0, ge=0)

    @field_validator("mean_ranges")
    @classmethod
    def _ordered_ranges(cls, ranges):
        if len(ranges) < 2:
            raise ValueError("At least two variables are required")
        for low, high in ranges:
            if low > high:
                raise ValueError(f"Mean range lower bound exceeds upper bound: ({low}, {high})")
        return ranges

    @field_validator("eigen_range")
    @classmethod
    def _positive_eigen(cls, value):
        if not 0 < value[0] <= value[1]:
            raise ValueError(f"Eigenvalue range must be positive and ordered, got {value}")
        return value

    @model_validator(mode="after")
    def _binary_indices(self) -> "SimulationConfig":
        p = len(self.mean_ranges)
        binary = self.binary_index
        if not 0 <= binary < p or self.binary_source >= p or self.binary_source == binary:
            raise ValueError("binary_column and binary_source must be distinct variable indices")
        return self

    @property
    def n_vars(self) -> int:
        return len(self.mean_ranges)

    @property
    def binary_index(self) -> int:
        return len(self.mean_ranges) - 1 if self.binary_column is None else self.binary_column

    @property
    def variable_names(self) -> List[str]:
        return [f"V{i + 1}" for i in range(self.n_vars)]

class MissingnessConfig(BaseModel):
    """MAR donor rule (simulation) or flat Bernoulli rule (replication mode)."""
    mode: Literal["mar", "flat"] = "mar"
    offset: float = Field(0.3, ge=0.0, lt=1.0, description="Subtracted from the mean donor CDF")
    flat_probability: float = Field(0.1, ge=0.0, lt=1.0, description="P(missing) in flat mode")
    donors: Optional[Dict[str, Tuple[str, str]]] = Field(
        None, description="target -> (donor1, donor2); default (j+1, j+2) mod p"
    )
    targets: Optional[List[str]] = Field(None, description="Columns receiving missingness; default all data columns")

# === Regression Specification ===
class RegressionSpec(BaseModel):
    """Conjugate Bayesian linear regression embedded in the copula chain."""
    outcome: str
    predictors: List[str] = Field(..., min_length=1)
    intercept: bool = True
    prior_mean: Optional[List[float]] = Field(None, description="Coefficient prior mean; default 0")
    prior_precision: float = Field(1e-4, gt=0.0, description="Coefficient prior precision (times I)")
    shape: float = Field(0.01, gt=0.0, description="Inverse-gamma shape of the error variance")
    scale: float = Field(0.01, gt=0.0, description="Inverse-gamma scale of the error variance")

    @model_validator(mode="after")
    def _distinct(self) -> "RegressionSpec":
        if self.outcome in self.predictors:
            raise ValueError("Outcome cannot also be a predictor")
        if len(set(self.predictors)) != len(self.predictors):
            raise ValueError("Duplicate predictors")
        if self.prior_mean is not None and len(self.prior_mean) != len(self.parameter_names) - 1:
            raise ValueError("prior_mean length must match the number of coefficients")
        return self

    @property
    def parameter_names(self) -> List[str]:
        names = (["(Intercept)"] if self.intercept else []) + list(self.predictors)
        return names + ["sigma2"]

# === Benchmark Grid ===
class BenchmarkGrid(BaseModel):
    periods: List[int] = Field(default_factory=lambda: [20])
    rhos: List[float] = Field(default_factory=lambda: [0.85])
    replicates: int = Field(1, ge=1)

    @field_validator("periods")
    @classmethod
    def _periods(cls, values):
        if not values or any(t < 2 for t in values):
            raise ValueError("Grid periods must be non-empty and >= 2")
        return values

    @field_validator("rhos")
    @classmethod
    def _rhos(cls, values):
        if not values or any(not abs(r) < 1 for r in values):
            raise ValueError("Grid rhos must be non-empty with |rho| < 1")
        return values

    @property
    def n_cells(self) -> int:
        return len(self.periods) * len(self.rhos) * self.replicates

# === Run Configuration (JSON --config file) ===
class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    chain: ChainConfig = Field(default_factory=ChainConfig)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    missingness: MissingnessConfig = Field(default_factory=MissingnessConfig)
    regression: Optional[RegressionSpec] = None
    grid: BenchmarkGrid = Field(default_factory=BenchmarkGrid)
    lags: int = Field(0, ge=0)
    exclude: List[str] = Field(default_factory=list)
    level: float = Field(0.95, gt=0.0, lt=1.0)
    jobs: int = Field(1, ge=1)
    export_format: Literal["long", "frames"] = "long"
    round_discrete: bool = False

# === Evaluation Results ===
class VariableMetrics(BaseModel):
    name: str
    kind: str
    n_cells: int
    mae_all: Optional[float] = None
    rmse_all: Optional[float] = None
    mae_mean: Optional[float] = None
    rmse_mean: Optional[float] = None
    coverage: Optional[float] = None
    percent_correct: Optional[float] = None
    baseline_rmse: Optional[float] = Field(None, description="Column-mean imputation RMSE")
    baseline_percent_correct: Optional[float] = Field(None, description="Marginal-mode imputation")

    @model_validator(mode="after")
    def _ordered_errors(self) -> "VariableMetrics":
        for mae, rmse in ((self.mae_all, self.rmse_all), (self.mae_mean, self.rmse_mean)):
            if mae is not None and rmse is not None and rmse < mae * (1 - 1e-9):
                raise ValueError(f"RMSE {rmse} below MAE {mae} for {self.name}")
        for share in (self.coverage, self.percent_correct, self.baseline_percent_correct):
            if share is not None and not 0.0 <= share <= 1.0:
                raise ValueError(f"Share outside [0, 1] for {self.name}: {share}")
        return self

class MetricsReport(BaseModel):
    """MAE/RMSE/percent-correct/coverage/timing for one imputed-vs-truth comparison."""
    dataset: str
    level: float = 0.95
    seconds: Optional[float] = Field(None, description="Chain wall-clock")
    n_units: Optional[int] = None
    n_periods: Optional[int] = None
    rho: Optional[float] = None
    variables: List[VariableMetrics] = Field(default_factory=list)
    mae_all: Optional[float] = None
    rmse_all: Optional[float] = None
    mae_mean: Optional[float] = None
    rmse_mean: Optional[float] = None
    coverage: Optional[float] = None
    percent_correct: Optional[float] = None

    def variable(self, name: str) -> VariableMetrics:
        for entry in self.variables:
            if entry.name == name:
                return entry
        raise KeyError(name)

    def to_tidy(self) -> pd.DataFrame:
        """Long rows (dataset, variable, metric, value); aggregates use variable "overall"."""
        metrics = ("mae_all", "rmse_all", "mae_mean", "rmse_mean", "coverage", "percent_correct")
        rows = []
        for entry in self.variables:
            for metric in metrics + ("baseline_rmse", "baseline_percent_correct"):
                value = getattr(entry, metric)
                if value is not None:
                    rows.append((self.dataset, entry.name, metric, value))
        for metric in metrics:
            value = getattr(self, metric)
            if value is not None:
                rows.append((self.dataset, "overall", metric, value))
        if self.seconds is not None:
            rows.append((self.dataset, "overall", "seconds", self.seconds))
        return pd.DataFrame(rows, columns=["dataset", "variable", "metric", "value"])

class PooledEstimate(BaseModel):
    """Rubin's rules: q̄, W̄, B and T = W̄ + (1 + 1/m) B (per parameter)."""
    m: int = Field(..., ge=2)
    estimate: List[float]
    within: List[float]
    between: List[float]
    total: List[float]
    relative_increase: List[float] = Field(default_factory=list, description="(1 + 1/m) B / W̄")
    fraction_missing: List[float] = Field(default_factory=list, description="(1 + 1/m) B / T")
    df: List[float] = Field(default_factory=list, description="Rubin's degrees of freedom")
    names: Optional[List[str]] = None

    @model_validator(mode="after")
    def _total_dominates(self) -> "PooledEstimate":
        for w, b, t in zip(self.within, self.between, self.total):
            if b < 0 or t < w:
                raise ValueError("Pooled variances must satisfy B >= 0 and T >= W̄")
        return self

class PosteriorSummaryRow(BaseModel):
    parameter: str
    mean: float
    sd: float
    lower: float
    upper: float
    level: float

# === Run Manifest ===
class RunManifest(BaseModel):
    subcommand: str
    config: Dict
    seed: int
    version: str
    started_at: datetime
    finished_at: Optional[datetime] = None
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: List[str] = Field(default_factory=list)
    copula_columns: Optional[int] = None
    exit_code: int = 0
