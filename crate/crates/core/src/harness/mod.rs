//! Monte Carlo experiment runner.

pub mod config;
pub mod sweep;
pub mod trial;

pub use config::{Algorithm, Detection, ExperimentConfig, Scenario, SolverConfig, SweepAxis};
pub use sweep::{correlation_csv, run_sweep, run_to_file, write_csv, Stat, SummaryRow};
pub use trial::{run_trial, trial_seed, PointContext, TrialRecord};
