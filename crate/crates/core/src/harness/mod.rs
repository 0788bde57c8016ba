//! Experiment orchestration: configuration, data generation, training,
//! closed-loop evaluation, reports and self-verification.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod data;
pub mod eval;
pub mod report;
pub mod tracks;
pub mod train;
pub mod verify;

use thiserror::Error;

use crate::controller::ControlError;
use crate::expert::ExpertError;
use crate::geometry::GeometryError;
use crate::losses::LossError;
use crate::network::NetError;
use crate::simulator::SimError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tracks(#[from] tracks::TrackGenError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("missing inputs: {0:?}")]
    MissingInputs(Vec<String>),
    #[error("{0}")]
    Invalid(String),
    #[error("training diverged: {0}")]
    Diverged(String),
}

impl HarnessError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.display().to_string(), source }
    }
}
