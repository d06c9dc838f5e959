import time
from pathlib import Path

from app.models.schemas import ChainConfig, MissingnessConfig, SimulationConfig
from app.services.copula_sampler import run_chain, summarize
from app.services.data_model import add_lags, source_columns, write_csv
from app.services.evaluation import ImputedCells, build_report, time_chain
from app.services.simulation import simulate_one
from app.utils.logging import progress_logger, setup_logging

# ---- Desk-scale run: 120 units × T=20, 5 variables + 4 lags each ----
n_periods = 20
rho = 0.85
n_lags = 4
seed = 2024
work_dir = Path("output-timing") / f"T{n_periods}_rho{rho}"
work_dir.mkdir(parents=True, exist_ok=True)

def fmt(s):
    # seconds -> "xxx ms" or "x.xxx s"
    return f"{s*1000:.1f} ms" if s < 1 else f"{s:.3f} s"

setup_logging("INFO")
t0_total = time.perf_counter()

# ---- Simulated panel + MAR missingness ----
t0_sim = time.perf_counter()
dataset = simulate_one(SimulationConfig(n_periods=n_periods, rho=rho), MissingnessConfig(), seed)
write_csv(dataset.masked, work_dir / "masked.csv")
t1_sim = time.perf_counter()

# ---- Lag ----
t0_lag = time.perf_counter()
table = add_lags(dataset.masked, n_lags)
t1_lag = time.perf_counter()

# ---- 3000-iteration chain ----
config = ChainConfig(total_iterations=3000, thin=3, burn_in=500, seed=seed)
chain, chain_seconds = time_chain(lambda: run_chain(table, config, progress=progress_logger(500)))
chain = chain.restrict(source_columns(table))

# ---- Summary & evaluation ----
t0_eval = time.perf_counter()
summary = summarize(chain)
report = build_report(work_dir.name, dataset.truth, dataset.masked, ImputedCells.from_chain(chain, summary),
                      seconds=chain_seconds, n_units=120, n_periods=n_periods, rho=rho)
report.to_tidy().to_csv(work_dir / "metrics_tidy.csv", index=False, lineterminator="\n")
t1_eval = time.perf_counter()
t1_total = time.perf_counter()

print("\n=== TIMING SUMMARY ===")
print(f"Simulate {dataset.masked.n_rows} rows : {fmt(t1_sim - t0_sim)}")
print(f"Lags ({table.n_cols} copula columns) : {fmt(t1_lag - t0_lag)}")
print(f"Chain {config.total_iterations} iterations : {fmt(chain_seconds)}  ({chain.n_frames} frames)")
print(f"Evaluation          : {fmt(t1_eval - t0_eval)}")
print(f"TOTAL               : {fmt(t1_total - t0_total)}")
print(f"\nRMSE (mean) {report.rmse_mean:.4f} | coverage {report.coverage:.3f} | under 5 min: {chain_seconds < 300}")
print(f"Results in: {work_dir}")
