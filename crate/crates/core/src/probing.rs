//! Agent/critic probing: run the probed agent and the critic side by side
//! over an environment to produce a trajectory where every step carries the
//! critic's 1..5 confidence in the agent's action, then refine it.
//!
//! Per step: the agent proposes, the critic supplies its own action and
//! scores the agent's, the agent's action runs only on a score of 5, and
//! the critic then locates the plan item reached and judges completion.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Backend, BackendError};
use crate::codec::CodecError;
use crate::env::{EnvError, Environment};
use crate::types::{validate_step, Action, AnnotatedStep, Instruction, StepViolation, Trajectory};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeCaps {
    pub max_steps: usize,
    pub max_retries_per_plan_item: usize,
    pub stop_on_backend_error: bool,
}

impl Default for ProbeCaps {
    fn default() -> Self {
        Self { max_steps: 10, max_retries_per_plan_item: 3, stop_on_backend_error: true }
    }
}

impl ProbeCaps {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_steps == 0 || self.max_retries_per_plan_item == 0 {
            return Err("probe caps must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProbeStatus {
    /// The critic judged the instruction finished.
    Finished,
    BudgetExhausted,
    /// The critic kept reporting the same plan item past the retry cap.
    Stalled {
        plan_item: usize,
    },
    Aborted {
        reason: String,
    },
}

#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub trajectory: Trajectory,
    pub status: ProbeStatus,
}

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("invalid probe caps: {0}")]
    Caps(String),
}

/// Receives each step as it is recorded.
pub trait ProbeObserver: Send + Sync {
    fn on_step(&self, _instruction: &Instruction, _step: &AnnotatedStep) {}
}

pub struct NoopObserver;

impl ProbeObserver for NoopObserver {}

fn agent_failure(e: &BackendError, caps: &ProbeCaps) -> bool {
    match e {
        BackendError::Codec(CodecError::MalformedAction(_)) => true,
        BackendError::Unavailable(_) => !caps.stop_on_backend_error,
        _ => false,
    }
}

/// Probes one instruction. Backend failures end the run with
/// [`ProbeStatus::Aborted`] and whatever steps were recorded; only
/// environment failures are errors.
pub async fn probe_instruction(
    instruction: &Instruction,
    agent: &Backend,
    critic: &Backend,
    env: &mut dyn Environment,
    caps: &ProbeCaps,
    observer: &dyn ProbeObserver,
) -> Result<ProbeOutcome, ProbeError> {
    caps.validate().map_err(ProbeError::Caps)?;
    env.reset().await?;

    let mut trajectory = Trajectory {
        instruction: instruction.clone(),
        steps: Vec::new(),
        finished: false,
        plan: crate::types::PlanSchedule::new(Vec::new()),
    };
    let abort = |trajectory, e: BackendError| {
        Ok(ProbeOutcome { trajectory, status: ProbeStatus::Aborted { reason: e.to_string() } })
    };

    trajectory.plan = match critic.critic_plan(instruction).await {
        Ok(plan) => plan,
        Err(e) => return abort(trajectory, e),
    };

    let mut screenshot = env.screenshot().await?;
    let mut same_item = 0usize;
    let mut status = ProbeStatus::BudgetExhausted;

    for t in 0..caps.max_steps {
        let history = trajectory.history(t);
        let plan_index = trajectory.plan.current_index();
        let plan_item = trajectory.plan.items[plan_index].clone();

        let (agent_action, agent_error) = match agent.agent_predict(instruction, &screenshot, &history).await {
            Ok(action) => (action, None),
            Err(e) if agent_failure(&e, caps) => (Action::Impossible, Some(e.to_string())),
            Err(e) => return abort(trajectory, e),
        };
        let critic_action = match critic.critic_supervise(instruction, &plan_item, &screenshot, &history).await {
            Ok(action) => action,
            Err(e) => return abort(trajectory, e),
        };
        let score = if agent_error.is_some() {
            1
        } else {
            match critic
                .critic_score(instruction, &plan_item, &screenshot, &agent_action, &critic_action, &history)
                .await
            {
                Ok(score) => score,
                Err(e) => return abort(trajectory, e),
            }
        };
        let executed_action = if score == 5 { agent_action.clone() } else { critic_action.clone() };

        let supplementary = match env.apply(&executed_action).await {
            Ok(outcome) if outcome.no_effect => Some("no effect".to_string()),
            Ok(_) => None,
            Err(EnvError::Rejected(reason)) => Some(format!("no effect: device rejected action: {reason}")),
            Err(e) => return Err(e.into()),
        };

        let step = AnnotatedStep {
            index: t,
            screenshot,
            agent_action,
            agent_error,
            critic_action: Some(critic_action),
            score,
            executed_action,
            plan_item: plan_index,
            supplementary,
        };
        observer.on_step(instruction, &step);
        trajectory.steps.push(step);

        screenshot = env.screenshot().await?;

        let phase = match critic.critic_phase(instruction, &trajectory.plan, &screenshot).await {
            Ok(index) => index,
            Err(e) => return abort(trajectory, e),
        };
        if phase == trajectory.plan.cursor {
            same_item += 1;
        } else {
            trajectory.plan.cursor = phase;
            same_item = 0;
        }

        let done = match critic.critic_done(instruction, &trajectory.plan, &screenshot).await {
            Ok(done) => done,
            Err(e) => return abort(trajectory, e),
        };
        if done {
            trajectory.finished = true;
            status = ProbeStatus::Finished;
            break;
        }
        if same_item > caps.max_retries_per_plan_item {
            status = ProbeStatus::Stalled { plan_item: trajectory.plan.cursor };
            break;
        }
    }

    Ok(ProbeOutcome { trajectory, status })
}

/// Result of refining a trajectory that was kept.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub trajectory: Trajectory,
    /// Original indices of steps whose executed action was rewritten.
    pub rewritten: Vec<usize>,
    /// Original indices of dropped steps, with what was wrong.
    pub dropped: Vec<(usize, Vec<StepViolation>)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("trajectory rejected: {}", reasons.join("; "))]
pub struct Rejection {
    pub reasons: Vec<String>,
}

/// Largest fraction of steps that may be dropped before the whole
/// trajectory is rejected.
pub const MAX_DROPPED_FRACTION: f64 = 0.2;

/// Enforces score/action alignment: a score of 5 executes the agent's
/// action, anything lower the critic's. Steps that cannot be repaired are
/// dropped; more than 20% dropped, or a plan that does not line up with the
/// steps, rejects the trajectory.
pub fn refine_trajectory(traj: &Trajectory) -> Result<Refinement, Rejection> {
    let mut kept = Vec::with_capacity(traj.steps.len());
    let mut rewritten = Vec::new();
    let mut dropped = Vec::new();

    for step in &traj.steps {
        let violations = validate_step(step);
        if violations.is_empty() {
            kept.push(step.clone());
            continue;
        }
        if violations.iter().all(|v| *v == StepViolation::ExecutedScoreMismatch) {
            let mut fixed = step.clone();
            fixed.executed_action = if step.score == 5 {
                step.agent_action.clone()
            } else {
                step.critic_action.clone().expect("mismatch implies critic action present")
            };
            rewritten.push(step.index);
            kept.push(fixed);
        } else {
            dropped.push((step.index, violations));
        }
    }

    let mut reasons = Vec::new();
    let total = traj.steps.len();
    if total > 0 && dropped.len() as f64 > MAX_DROPPED_FRACTION * total as f64 {
        reasons.push(format!("{} of {total} steps malformed", dropped.len()));
        for (index, violations) in &dropped {
            let text: Vec<String> = violations.iter().map(ToString::to_string).collect();
            reasons.push(format!("step {index}: {}", text.join(", ")));
        }
    }

    if !dropped.is_empty() {
        for (i, step) in kept.iter_mut().enumerate() {
            step.index = i;
        }
    }
    let refined = Trajectory { steps: kept, ..traj.clone() };
    reasons.extend(refined.structural_problems());

    if reasons.is_empty() {
        Ok(Refinement { trajectory: refined, rewritten, dropped })
    } else {
        Err(Rejection { reasons })
    }
}
