//! Static replay: query a policy on recorded steps and gate its answers
//! without an environment, substituting the recorded action whenever the
//! gate fires.

use serde::{Deserialize, Serialize};

use super::{decide, Verdict};
use crate::backends::{Backend, BackendError};
use crate::codec::{grammar, CodecError};
use crate::types::{Action, ScreenDims, Trajectory};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub instruction_id: String,
    pub step_index: usize,
    pub dims: ScreenDims,
    #[serde(with = "grammar")]
    pub gt_action: Action,
    pub gt_score: u8,
    #[serde(with = "grammar")]
    pub pred_action: Action,
    pub pred_score: u8,
    pub verdict: Verdict,
    /// `pred_action` when autonomous, `gt_action` when the gate fired.
    #[serde(with = "grammar")]
    pub executed: Action,
}

/// Replays every trajectory step by step. The policy sees the recorded
/// screenshot and the recorded history. An unparseable policy reply counts
/// as `IMPOSSIBLE` with score 1; other backend failures stop the replay.
pub async fn replay_static(
    trajectories: &[Trajectory],
    policy: &Backend,
    gamma: f64,
) -> Result<Vec<Vec<ReplayRecord>>, BackendError> {
    let mut out = Vec::with_capacity(trajectories.len());
    for traj in trajectories {
        let mut records = Vec::with_capacity(traj.steps.len());
        for (t, step) in traj.steps.iter().enumerate() {
            let history = traj.history(t);
            let (pred_action, pred_score) =
                match policy.policy_predict(&traj.instruction, &step.screenshot, &history).await {
                    Ok(p) => p,
                    Err(BackendError::Codec(CodecError::MalformedAction(_) | CodecError::MalformedScore(_))) => {
                        (Action::Impossible, 1)
                    }
                    Err(e) => return Err(e),
                };
            records.push(gate_record(traj, t, pred_action, pred_score, gamma));
        }
        out.push(records);
    }
    Ok(out)
}

/// Builds the gated record for step `t` from a given prediction.
pub fn gate_record(traj: &Trajectory, t: usize, pred_action: Action, pred_score: u8, gamma: f64) -> ReplayRecord {
    let step = &traj.steps[t];
    let verdict = decide(pred_score, gamma);
    let executed = match verdict {
        Verdict::Autonomous => pred_action.clone(),
        Verdict::Interactive => step.executed_action.clone(),
    };
    ReplayRecord {
        instruction_id: traj.instruction.id.clone(),
        step_index: t,
        dims: step.screenshot.dims,
        gt_action: step.executed_action.clone(),
        gt_score: step.score,
        pred_action,
        pred_score,
        verdict,
        executed,
    }
}
