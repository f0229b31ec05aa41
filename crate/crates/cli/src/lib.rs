//! Command-line front end: simulate, build, optimize, relocalize, evaluate.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod commands;
pub mod config;
pub mod manifest;

pub use commands::{build_db, eval, optimize_db, relocalize, simulate, EvalOutcome, Paths};
pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0} exists, pass --force to overwrite")]
    Exists(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Sim(#[from] surfloc::simulator::SimError),
    #[error(transparent)]
    Map(#[from] surfloc::surfel_map::SurfelMapError),
    #[error(transparent)]
    Database(#[from] surfloc::database::DatabaseError),
    #[error(transparent)]
    Descriptor(#[from] surfloc::descriptor::DescriptorError),
    #[error(transparent)]
    Reloc(#[from] surfloc::relocalizer::RelocError),
    #[error(transparent)]
    Records(#[from] surfloc::relocalizer::RecordError),
    #[error(transparent)]
    Trajectory(#[from] surfloc::geometry::TrajectoryError),
    #[error(transparent)]
    Eval(#[from] surfloc::evaluation::EvalError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }
}
