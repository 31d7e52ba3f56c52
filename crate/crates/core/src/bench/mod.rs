//! Experiment harness: Monte Carlo runs, consistency and accuracy metrics,
//! memory and timing measurements, and the verification battery.

pub mod experiment;
pub mod metrics;
pub mod scaling;
pub mod verify;

pub use experiment::{
    assemble_report,
    run_experiment, run_mode, summarize, thread_count, write_report, ExperimentConfig, ExperimentError, ExperimentReport, FilterSettings,
    ModeSpec, ModeSummary, RunReport, SeedWorld, REPORT_SCHEMA_VERSION,
};
pub use metrics::{anees_bounds, average_nees, median, nees_series, rmse, MetricsError, NeesSeries};
pub use scaling::{backsolve_benchmark, corridor_map, loaded_belief, loglog_slope, map_update_benchmark, memory_report, revisit_map, BacksolvePoint, MemoryRow};
