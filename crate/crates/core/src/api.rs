//! HTTP wire types of the episode service, shared with its client.
//!
//! | method | path                        | body / reply                          |
//! |--------|-----------------------------|---------------------------------------|
//! | POST   | `/episodes`                 | [`CreateEpisode`] → 202 [`EpisodeCreated`] |
//! | GET    | `/episodes`                 | → 200 `[EpisodeSummary]`              |
//! | GET    | `/episodes/{id}`            | → 200 `EpisodeState`                  |
//! | GET    | `/episodes/{id}/events`     | WebSocket of [`EventFrame`], or a JSON array without upgrade; `?since=<seq>` |
//! | POST   | `/episodes/{id}/intervene`  | [`InterveneBody`] → 204               |
//!
//! Errors carry an [`ApiError`] body.

use serde::{Deserialize, Serialize};

use crate::controller::{EpisodeEvent, EpisodeStatus, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    #[default]
    Sim,
    Device,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateEpisode {
    pub instruction_id: String,
    #[serde(default)]
    pub mode: Mode,
    /// Defaults to the configured threshold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub env: EnvKind,
    #[serde(default = "default_policy")]
    pub policy_backend: String,
    /// Answer interventions with this critic backend instead of waiting for
    /// an operator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_backend: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

fn default_policy() -> String {
    "policy".into()
}

impl CreateEpisode {
    pub fn new(instruction_id: impl Into<String>) -> Self {
        Self {
            instruction_id: instruction_id.into(),
            mode: Mode::default(),
            gamma: None,
            env: EnvKind::Sim,
            policy_backend: default_policy(),
            oracle_backend: None,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeCreated {
    pub episode_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode_id: String,
    pub instruction_id: String,
    pub status: EpisodeStatus,
}

/// Body of an intervention; `action` is in the textual action grammar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterveneBody {
    pub request_id: String,
    pub action: String,
}

/// One event on the stream. Sequence numbers start at 1 and increase by one
/// per event of the episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventFrame {
    pub seq: u64,
    #[serde(flatten)]
    pub event: EpisodeEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    /// `validation`, `not_found`, `conflict`, `unprocessable` or `internal`.
    pub error: String,
    pub message: String,
}
