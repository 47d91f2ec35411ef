//! Experiment files and the commands behind the `openmatch` binary.

pub mod commands;
pub mod spec;

pub use spec::{DataSource, ExperimentSpec, SpecFile, Toggles};
