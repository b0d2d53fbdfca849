//! Experiment runner for fastadv: TOML configs with presets, single runs,
//! sweeps with repeats, summaries and curve files.

pub mod config;
pub mod curves;
pub mod error;
pub mod experiment;
pub mod presets;
pub mod summary;

pub use config::{parse_real, DataSource, DataSpec, ExperimentSpec, RunFile};
pub use curves::emit_curves;
pub use error::{HarnessError, Result};
pub use experiment::{load_data, output_root, plan, run_experiment, run_single, OUTPUT_ROOT_ENV};
pub use summary::{write_summary, SummaryRow};
