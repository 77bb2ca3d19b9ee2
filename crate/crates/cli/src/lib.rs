//! Configuration, experiment driver and result files for the `biapnn`
//! command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod output;
pub mod run;

pub use config::{ConfigError, ExperimentConfig, MethodChoice, ProblemChoice};
pub use output::{emit_results, Summary};
pub use run::{run_experiment, Mode, ResultsBundle, RunError};
