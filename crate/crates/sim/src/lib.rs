//! Scenario simulation for swarmlink: UAV and ground station nodes wired
//! over the middleware, a deterministic runner with JSONL traces, trace
//! property checkers and live drivers (wall-clock sim and UDP).

pub mod bundled;
pub mod config;
pub mod endpoint;
pub mod gs;
pub mod harness;
pub mod host;
pub mod live;
pub mod runner;
pub mod trace;
pub mod uav;
pub mod verify;

use thiserror::Error;

pub use config::{ConfigError, ScenarioConfig};
pub use runner::{run_to_vec, RunSummary, Runner};
pub use trace::{TraceKind, TraceRecord};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl SimError {
    /// Process exit code for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            SimError::Config(_) => 2,
            SimError::Invariant(_) => 3,
            SimError::Io(_) => 1,
        }
    }
}
