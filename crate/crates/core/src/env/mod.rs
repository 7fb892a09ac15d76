//! Execution surfaces for episodes.

pub mod bridge;
pub mod sim;

use async_trait::async_trait;
use thiserror::Error;

use crate::types::{Action, Screenshot};

pub use bridge::{serve_sim_bridge, DeviceBridge};
pub use sim::{Goal, Region, ScreenDef, SimApp, SimEnv, SimState, TransitionDef};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvError {
    #[error("unknown instruction {0:?}")]
    UnknownInstruction(String),
    /// The device refused an action (`ERR <reason>`). The step still counts
    /// and is recorded as having no effect.
    #[error("device rejected action: {0}")]
    Rejected(String),
    #[error("device protocol error: {0}")]
    Protocol(String),
    #[error("device i/o: {0}")]
    Io(String),
    #[error("invalid app definition: {0}")]
    InvalidApp(String),
    #[error("{0} is not supported by this environment")]
    Unsupported(&'static str),
}

impl From<std::io::Error> for EnvError {
    fn from(e: std::io::Error) -> Self {
        EnvError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ApplyOutcome {
    /// The action changed nothing on screen.
    pub no_effect: bool,
}

/// A device-like surface. One instance belongs to one episode.
#[async_trait]
pub trait Environment: Send {
    async fn reset(&mut self) -> Result<(), EnvError>;
    async fn screenshot(&mut self) -> Result<Screenshot, EnvError>;
    async fn apply(&mut self, action: &Action) -> Result<ApplyOutcome, EnvError>;
    /// Whether the goal registered for `instruction_id` holds now.
    fn goal_satisfied(&self, instruction_id: &str) -> Result<bool, EnvError>;
}
