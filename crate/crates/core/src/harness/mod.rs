//! Convergence sweeps over `ε`, their configuration and output files.

pub mod config;
pub mod output;
pub mod panel;
pub mod sweeps;

pub use config::{log_spaced, ExperimentConfig, SystemConfig};
pub use output::{run_id, write_report, RunSummary};
pub use panel::TestFunction;
pub use sweeps::{
    run_fluctuation_sweep, run_strong_sweep, run_weak_sweep, SweepKind, SweepReport, SweepRow, SweepSeries,
};
