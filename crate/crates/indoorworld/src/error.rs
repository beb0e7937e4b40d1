use thiserror::Error;

use crate::house::Domain;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("house generation failed for {domain} seed {seed} after {attempts} attempts")]
    Generation { domain: Domain, seed: u64, attempts: usize },
    #[error("invalid house: {0}")]
    InvalidHouse(String),
    #[error("invalid pose ({x:.3}, {y:.3})")]
    InvalidPose { x: f64, y: f64 },
    #[error("no room of type {0} reachable")]
    Unreachable(String),
    #[error("unknown {kind} `{value}`")]
    Parse { kind: &'static str, value: String },
    #[error("bank format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = WorldError> = std::result::Result<T, E>;
