//! Where corrective actions come from when the gate fires.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use thiserror::Error;
use tokio::sync::oneshot;

use super::{InterventionRequest, InterventionResponse, Source};
use crate::backends::Backend;
use crate::codec::parse_action;
use crate::types::{Action, Trajectory};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SourceError {
    #[error("no ground truth for {instruction_id} step {step_index}")]
    NoGroundTruth { instruction_id: String, step_index: usize },
    #[error("oracle failed: {0}")]
    Oracle(String),
    #[error("intervention channel closed")]
    Closed,
}

#[async_trait]
pub trait InterventionSource: Send + Sync {
    async fn intervene(&self, request: InterventionRequest) -> Result<InterventionResponse, SourceError>;
}

/// Answers with the recorded action for the same instruction and step.
#[derive(Debug, Clone, Default)]
pub struct GroundTruthSource {
    actions: HashMap<String, Vec<Action>>,
}

impl GroundTruthSource {
    pub fn new(actions: HashMap<String, Vec<Action>>) -> Self {
        Self { actions }
    }

    /// Uses each trajectory's executed actions as ground truth.
    pub fn from_trajectories<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>) -> Self {
        let actions = trajectories
            .into_iter()
            .map(|t| {
                let actions = t.steps.iter().map(|s| s.executed_action.clone()).collect();
                (t.instruction.id.clone(), actions)
            })
            .collect();
        Self { actions }
    }
}

#[async_trait]
impl InterventionSource for GroundTruthSource {
    async fn intervene(&self, request: InterventionRequest) -> Result<InterventionResponse, SourceError> {
        let action = self
            .actions
            .get(&request.instruction.id)
            .and_then(|steps| steps.get(request.step_index))
            .cloned()
            .ok_or_else(|| SourceError::NoGroundTruth {
                instruction_id: request.instruction.id.clone(),
                step_index: request.step_index,
            })?;
        Ok(InterventionResponse { request_id: request.request_id, action, source: Source::GroundTruth })
    }
}

/// Asks a stronger model, through the critic's supervision call.
pub struct OracleSource {
    critic: Backend,
}

impl OracleSource {
    pub fn new(critic: Backend) -> Self {
        Self { critic }
    }
}

#[async_trait]
impl InterventionSource for OracleSource {
    async fn intervene(&self, request: InterventionRequest) -> Result<InterventionResponse, SourceError> {
        let history = request
            .history
            .iter()
            .map(|a| parse_action(a))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| SourceError::Oracle(e.to_string()))?;
        let plan_item = request.plan_item.as_deref().unwrap_or(&request.instruction.text);
        let action = self
            .critic
            .critic_supervise(&request.instruction, plan_item, &request.screenshot, &history)
            .await
            .map_err(|e| SourceError::Oracle(e.to_string()))?;
        Ok(InterventionResponse { request_id: request.request_id, action, source: Source::Oracle })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HubError {
    /// Nothing is waiting on this request id: it was never issued, already
    /// answered, or abandoned.
    #[error("no pending intervention {0:?}")]
    Stale(String),
    #[error("invalid action: {0}")]
    InvalidAction(String),
}

type Waiters = Arc<Mutex<HashMap<String, oneshot::Sender<InterventionResponse>>>>;

/// Rendezvous between a blocked episode and whoever answers it, keyed by
/// request id. Each request is answered at most once.
#[derive(Clone, Default)]
pub struct InterventionHub {
    waiters: Waiters,
}

struct Withdraw {
    waiters: Waiters,
    request_id: String,
}

impl Drop for Withdraw {
    fn drop(&mut self) {
        self.waiters.lock().expect("hub lock").remove(&self.request_id);
    }
}

impl InterventionHub {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pending(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.waiters.lock().expect("hub lock").keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Delivers `response` to the episode waiting on its request id.
    pub fn respond(&self, response: InterventionResponse) -> Result<(), HubError> {
        response.action.validate().map_err(HubError::InvalidAction)?;
        let sender = self
            .waiters
            .lock()
            .expect("hub lock")
            .remove(&response.request_id)
            .ok_or_else(|| HubError::Stale(response.request_id.clone()))?;
        let id = response.request_id.clone();
        sender.send(response).map_err(|_| HubError::Stale(id))
    }
}

#[async_trait]
impl InterventionSource for InterventionHub {
    async fn intervene(&self, request: InterventionRequest) -> Result<InterventionResponse, SourceError> {
        let (tx, rx) = oneshot::channel();
        self.waiters.lock().expect("hub lock").insert(request.request_id.clone(), tx);
        // Withdrawn if the episode stops waiting, e.g. on timeout.
        let _withdraw = Withdraw { waiters: self.waiters.clone(), request_id: request.request_id };
        rx.await.map_err(|_| SourceError::Closed)
    }
}
