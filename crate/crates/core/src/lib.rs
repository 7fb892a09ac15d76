//! Confidence-gated GUI agent orchestration.
//!
//! The crate covers the full offline and in-process surface:
//!
//! - [`types`] and [`codec`]: device actions, their textual grammar and the
//!   step-matching predicates used by evaluation.
//! - [`backends`]: prompt templates plus the agent, critic and policy calls
//!   made against remote or scripted models.
//! - [`probing`]: the agent/critic loop that produces confidence-annotated
//!   trajectories, and their refinement.
//! - [`controller`]: threshold-gated episodes that route low-confidence steps
//!   to an intervention source, plus static replay against recorded data.
//! - [`env`]: the simulated device and the device bridge line protocol.
//! - [`metrics`]: Type / SR / TSR, intervention confusion counts, HSR / IP /
//!   AP and relative efficiency.
//! - [`tsr`]: the Beta / LogNormal model of task success and its Monte Carlo
//!   validation.
//! - [`store`]: JSONL datasets with content-addressed screenshots.

pub mod api;
pub mod backends;
pub mod codec;
pub mod config;
pub mod controller;
pub mod env;
pub mod error;
pub mod metrics;
pub mod probing;
pub mod store;
pub mod tsr;
pub mod types;

pub use codec::{match_step, parse_action, parse_scored_output, serialize_action, StepMatch};
pub use error::{Error, ErrorKind};
pub use types::{
    validate_step, Action, ActionKind, AnnotatedStep, Instruction, Language, PayloadRef, PlanSchedule, Point, Scenario,
    ScreenDims, Screenshot, ScrollDir, StepViolation, Trajectory,
};
