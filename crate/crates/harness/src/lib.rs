//! Experiment runner and statistical acceptance suites for `dsbd-core`.
//!
//! - [`config`]: the flat experiment spec and its file format
//! - [`experiment`]: grid execution and per-cell aggregation
//! - [`report`]: CSV / JSON reports
//! - [`stats`]: TV distance, distribution match test, sign test
//! - [`suites`]: the acceptance suites
//! - [`seeds`]: per-trial seed derivation

pub mod config;
pub mod error;
pub mod experiment;
pub mod report;
pub mod seeds;
pub mod stats;
pub mod suites;

pub use config::{ExperimentSpec, Format};
pub use error::{HarnessError, Result};
pub use experiment::run_experiment;
pub use report::{CellRow, Report, TestRow};
