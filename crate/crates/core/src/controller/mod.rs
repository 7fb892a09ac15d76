//! Threshold-gated episodes.
//!
//! A confidence-emitting policy proposes `(action, score)` each step. Scores
//! below the threshold route the step to an intervention source whose action
//! runs instead.

pub mod intervention;
pub mod replay;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backends::Backend;
use crate::codec::grammar;
use crate::env::{EnvError, Environment};
use crate::types::{Action, Instruction, Screenshot};

pub use intervention::{GroundTruthSource, HubError, InterventionHub, InterventionSource, OracleSource, SourceError};
pub use replay::{replay_static, ReplayRecord};

pub const DEFAULT_GAMMA: f64 = 4.0;
pub const DEFAULT_MAX_STEPS: usize = 10;
pub const DEFAULT_INTERVENTION_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Autonomous,
    Interactive,
}

/// Interactive iff `score < gamma`; a score equal to the threshold acts
/// autonomously.
pub fn decide(score: u8, gamma: f64) -> Verdict {
    if f64::from(score) < gamma {
        Verdict::Interactive
    } else {
        Verdict::Autonomous
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Autonomous,
    #[default]
    Adaptive,
    Interactive,
}

impl Mode {
    /// The threshold actually applied: the two fixed modes pin it below and
    /// above every possible score.
    pub fn effective_gamma(self, gamma: f64) -> f64 {
        match self {
            Mode::Autonomous => 0.0,
            Mode::Adaptive => gamma,
            Mode::Interactive => 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionRequest {
    pub request_id: String,
    pub episode_id: String,
    pub step_index: usize,
    pub instruction: Instruction,
    pub screenshot: Screenshot,
    #[serde(with = "grammar")]
    pub proposed_action: Action,
    pub confidence: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_item: Option<String>,
    /// Actions executed so far in the episode, in grammar form.
    pub history: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Source {
    Human,
    Oracle,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionResponse {
    pub request_id: String,
    #[serde(with = "grammar")]
    pub action: Action,
    pub source: Source,
}

/// One executed step of a gated episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeStep {
    pub index: usize,
    pub screenshot_id: String,
    #[serde(with = "grammar")]
    pub proposed: Action,
    pub confidence: u8,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intervention: Option<Source>,
    #[serde(with = "grammar")]
    pub executed: Action,
    pub no_effect: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EpisodeStatus {
    Running,
    AwaitingIntervention,
    DoneComplete,
    DoneImpossible,
    DoneBudgetExhausted,
    Aborted,
}

impl EpisodeStatus {
    pub fn is_terminal(self) -> bool {
        !matches!(self, EpisodeStatus::Running | EpisodeStatus::AwaitingIntervention)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum EpisodeFailure {
    InterventionTimeout,
    Intervention(String),
    Backend(String),
    Environment(String),
}

impl std::fmt::Display for EpisodeFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EpisodeFailure::InterventionTimeout => f.write_str("intervention timed out"),
            EpisodeFailure::Intervention(e) => write!(f, "intervention failed: {e}"),
            EpisodeFailure::Backend(e) => write!(f, "policy backend failed: {e}"),
            EpisodeFailure::Environment(e) => write!(f, "environment failed: {e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeState {
    pub episode_id: String,
    pub instruction: Instruction,
    pub mode: Mode,
    pub gamma: f64,
    pub history: Vec<EpisodeStep>,
    /// Steps left before the budget runs out.
    pub step_budget: usize,
    pub status: EpisodeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending: Option<InterventionRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<EpisodeFailure>,
}

impl EpisodeState {
    pub fn new(
        episode_id: impl Into<String>,
        instruction: Instruction,
        mode: Mode,
        gamma: f64,
        max_steps: usize,
    ) -> Self {
        Self {
            episode_id: episode_id.into(),
            instruction,
            mode,
            gamma,
            history: Vec::new(),
            step_budget: max_steps,
            status: EpisodeStatus::Running,
            pending: None,
            failure: None,
        }
    }

    pub fn interventions(&self) -> usize {
        self.history.iter().filter(|s| s.intervention.is_some()).count()
    }

    pub fn autonomous_steps(&self) -> usize {
        self.history.len() - self.interventions()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum EpisodeEvent {
    StepStarted {
        step_index: usize,
        screenshot_id: String,
    },
    ActionProposed {
        step_index: usize,
        #[serde(with = "grammar")]
        action: Action,
        confidence: u8,
    },
    Decision {
        step_index: usize,
        verdict: Verdict,
    },
    InterventionRequested(Box<InterventionRequest>),
    ActionExecuted {
        step_index: usize,
        #[serde(with = "grammar")]
        action: Action,
        intervention: Option<Source>,
        no_effect: bool,
    },
    EpisodeFinished {
        status: EpisodeStatus,
        failure: Option<EpisodeFailure>,
    },
}

impl EpisodeEvent {
    pub fn type_name(&self) -> &'static str {
        match self {
            EpisodeEvent::StepStarted { .. } => "step_started",
            EpisodeEvent::ActionProposed { .. } => "action_proposed",
            EpisodeEvent::Decision { .. } => "decision",
            EpisodeEvent::InterventionRequested(_) => "intervention_requested",
            EpisodeEvent::ActionExecuted { .. } => "action_executed",
            EpisodeEvent::EpisodeFinished { .. } => "episode_finished",
        }
    }
}

/// Sees every event together with the state right after it.
pub trait EpisodeObserver: Send + Sync {
    fn on_event(&self, event: &EpisodeEvent, state: &EpisodeState);
}

pub struct NoopEpisodeObserver;

impl EpisodeObserver for NoopEpisodeObserver {
    fn on_event(&self, _: &EpisodeEvent, _: &EpisodeState) {}
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeCaps {
    pub max_steps: usize,
    /// `None` waits forever.
    pub intervention_timeout: Option<Duration>,
}

impl Default for EpisodeCaps {
    fn default() -> Self {
        Self { max_steps: DEFAULT_MAX_STEPS, intervention_timeout: Some(DEFAULT_INTERVENTION_TIMEOUT) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub state: EpisodeState,
    pub autonomous_steps: usize,
    pub interventions: usize,
}

pub struct EpisodeSetup<'a> {
    pub episode_id: String,
    pub instruction: &'a Instruction,
    pub mode: Mode,
    pub gamma: f64,
    pub caps: EpisodeCaps,
    /// Plan item shown alongside intervention requests.
    pub plan_item: Option<String>,
}

struct Runner<'a> {
    state: EpisodeState,
    observer: &'a dyn EpisodeObserver,
}

impl Runner<'_> {
    fn emit(&self, event: EpisodeEvent) {
        self.observer.on_event(&event, &self.state);
    }

    fn finish(mut self, status: EpisodeStatus, failure: Option<EpisodeFailure>) -> EpisodeResult {
        self.state.status = status;
        self.state.pending = None;
        self.state.failure = failure.clone();
        self.emit(EpisodeEvent::EpisodeFinished { status, failure });
        EpisodeResult {
            autonomous_steps: self.state.autonomous_steps(),
            interventions: self.state.interventions(),
            state: self.state,
        }
    }
}

/// Runs one gated episode to a terminal status. Failures end the episode
/// as `ABORTED` with the cause in `state.failure`.
pub async fn run_episode(
    setup: EpisodeSetup<'_>,
    policy: &Backend,
    env: &mut dyn Environment,
    source: Arc<dyn InterventionSource>,
    observer: &dyn EpisodeObserver,
) -> EpisodeResult {
    let gamma = setup.mode.effective_gamma(setup.gamma);
    let instruction = setup.instruction;
    let mut run = Runner {
        state: EpisodeState::new(
            setup.episode_id.clone(),
            instruction.clone(),
            setup.mode,
            setup.gamma,
            setup.caps.max_steps,
        ),
        observer,
    };
    let env_failure = |e: EnvError| Some(EpisodeFailure::Environment(e.to_string()));

    if let Err(e) = env.reset().await {
        return run.finish(EpisodeStatus::Aborted, env_failure(e));
    }
    let mut screenshot = match env.screenshot().await {
        Ok(s) => s,
        Err(e) => return run.finish(EpisodeStatus::Aborted, env_failure(e)),
    };
    let mut history: Vec<Action> = Vec::new();

    for t in 0..setup.caps.max_steps {
        run.emit(EpisodeEvent::StepStarted { step_index: t, screenshot_id: screenshot.id.clone() });

        let (proposed, confidence) = match policy.policy_predict(instruction, &screenshot, &history).await {
            Ok(p) => p,
            Err(e) => return run.finish(EpisodeStatus::Aborted, Some(EpisodeFailure::Backend(e.to_string()))),
        };
        run.emit(EpisodeEvent::ActionProposed { step_index: t, action: proposed.clone(), confidence });

        let verdict = decide(confidence, gamma);
        run.emit(EpisodeEvent::Decision { step_index: t, verdict });

        let (executed, intervention) = match verdict {
            Verdict::Autonomous => (proposed.clone(), None),
            Verdict::Interactive => {
                let request = InterventionRequest {
                    request_id: format!("{}-{t}", setup.episode_id),
                    episode_id: setup.episode_id.clone(),
                    step_index: t,
                    instruction: instruction.clone(),
                    screenshot: screenshot.clone(),
                    proposed_action: proposed.clone(),
                    confidence,
                    plan_item: setup.plan_item.clone(),
                    history: history.iter().map(ToString::to_string).collect(),
                };
                run.state.status = EpisodeStatus::AwaitingIntervention;
                run.state.pending = Some(request.clone());
                run.emit(EpisodeEvent::InterventionRequested(Box::new(request.clone())));

                let answer = source.intervene(request);
                let answer = match setup.caps.intervention_timeout {
                    Some(limit) => match tokio::time::timeout(limit, answer).await {
                        Ok(r) => r,
                        Err(_) => return run.finish(EpisodeStatus::Aborted, Some(EpisodeFailure::InterventionTimeout)),
                    },
                    None => answer.await,
                };
                run.state.status = EpisodeStatus::Running;
                run.state.pending = None;
                match answer {
                    Ok(response) => (response.action, Some(response.source)),
                    Err(e) => {
                        return run.finish(EpisodeStatus::Aborted, Some(EpisodeFailure::Intervention(e.to_string())))
                    }
                }
            }
        };

        let no_effect = match env.apply(&executed).await {
            Ok(outcome) => outcome.no_effect,
            Err(EnvError::Rejected(_)) => true,
            Err(e) => return run.finish(EpisodeStatus::Aborted, env_failure(e)),
        };

        run.state.history.push(EpisodeStep {
            index: t,
            screenshot_id: screenshot.id.clone(),
            proposed,
            confidence,
            verdict,
            intervention,
            executed: executed.clone(),
            no_effect,
        });
        run.state.step_budget -= 1;
        run.emit(EpisodeEvent::ActionExecuted { step_index: t, action: executed.clone(), intervention, no_effect });

        match executed {
            Action::Complete => return run.finish(EpisodeStatus::DoneComplete, None),
            Action::Impossible => return run.finish(EpisodeStatus::DoneImpossible, None),
            _ => {}
        }
        if env.goal_satisfied(&instruction.id).unwrap_or(false) {
            return run.finish(EpisodeStatus::DoneComplete, None);
        }
        history.push(executed);
        if t + 1 < setup.caps.max_steps {
            screenshot = match env.screenshot().await {
                Ok(s) => s,
                Err(e) => return run.finish(EpisodeStatus::Aborted, env_failure(e)),
            };
        }
    }

    run.finish(EpisodeStatus::DoneBudgetExhausted, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_examples() {
        assert_eq!(decide(3, 4.0), Verdict::Interactive);
        assert_eq!(decide(4, 4.0), Verdict::Autonomous);
        for score in 1..=5 {
            assert_eq!(decide(score, 0.0), Verdict::Autonomous);
            assert_eq!(decide(score, 6.0), Verdict::Interactive);
            assert_eq!(decide(score, Mode::Autonomous.effective_gamma(4.0)), Verdict::Autonomous);
            assert_eq!(decide(score, Mode::Interactive.effective_gamma(4.0)), Verdict::Interactive);
        }
        assert_eq!(Mode::Adaptive.effective_gamma(3.5), 3.5);
    }

    #[test]
    fn events_use_type_and_payload_with_grammar_actions() {
        let event = EpisodeEvent::ActionProposed { step_index: 2, action: Action::click(146, 357), confidence: 3 };
        let json = serde_json::to_value(&event).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"type": "action_proposed",
                               "payload": {"step_index": 2, "action": "CLICK <146, 357>", "confidence": 3}})
        );
        assert_eq!(json["type"], event.type_name());
        let back: EpisodeEvent = serde_json::from_value(json).unwrap();
        assert_eq!(back, event);
    }

    #[test]
    fn response_rejects_malformed_action() {
        let bad = serde_json::json!({"request_id": "r", "action": "CLICK <x>", "source": "HUMAN"});
        assert!(serde_json::from_value::<InterventionResponse>(bad).is_err());
    }
}
