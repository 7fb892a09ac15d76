mod common;

use std::sync::Arc;
use std::time::Duration;

use stepgate_core::backends::{Backend, ScriptedBackend};
use stepgate_core::env::{SimApp, SimEnv};
use stepgate_core::probing::{probe_instruction, refine_trajectory, NoopObserver, ProbeCaps, ProbeStatus};
use stepgate_core::{validate_step, Action};

const APP: &str = r#"{
  "initial": "a",
  "screens": {
    "a": {"dims": {"width": 1000, "height": 2000}, "payload_ref": {"inline": "YQ=="}},
    "b": {"dims": {"width": 1000, "height": 2000}, "payload_ref": {"inline": "Yg=="}},
    "c": {"dims": {"width": 1000, "height": 2000}, "payload_ref": {"inline": "Yw=="}},
    "d": {"dims": {"width": 1000, "height": 2000}, "payload_ref": {"inline": "ZA=="}}
  },
  "transitions": [
    {"from": "a", "action": "CLICK <10, 10>", "to": "b"},
    {"from": "b", "action": "CLICK <20, 20>", "to": "c"},
    {"from": "c", "action": "COMPLETE", "to": "d"}
  ],
  "goals": {"t": {"screen": "d"}}
}"#;

fn env() -> SimEnv {
    SimEnv::new(Arc::new(SimApp::from_json(APP).unwrap()))
}

fn backend(replies: &[&str]) -> Backend {
    Backend::scripted(ScriptedBackend::from_replies(replies.iter().map(|s| s.to_string())))
        .with_retries(0)
        .with_backoff(Duration::ZERO)
}

/// Critic replies for one step: supervise, score, phase, done.
fn critic_step<'a>(action: &'a str, score: &'a str, phase: &'a str, done: &'a str) -> [&'a str; 4] {
    [action, score, phase, done]
}

#[tokio::test]
async fn three_correct_steps_finish_with_top_scores() {
    let agent = backend(&["CLICK <10, 10>", "CLICK <20, 20>", "COMPLETE"]);
    let mut critic = vec!["1. open\n2. pick\n3. finish"];
    critic.extend(critic_step("CLICK <10, 10>", "5", "1", "no"));
    critic.extend(critic_step("CLICK <20, 20>", "5", "2", "no"));
    critic.extend(critic_step("COMPLETE", "5", "3", "yes"));
    let critic = backend(&critic);

    let mut env = env();
    let out =
        probe_instruction(&common::instruction("t"), &agent, &critic, &mut env, &ProbeCaps::default(), &NoopObserver)
            .await
            .unwrap();
    assert_eq!(out.status, ProbeStatus::Finished);
    let t = &out.trajectory;
    assert!(t.finished);
    assert_eq!(t.steps.len(), 3);
    assert!(t.steps.iter().all(|s| s.score == 5 && s.executed_action == s.agent_action));
    assert_eq!(t.steps.iter().map(|s| s.plan_item).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert_eq!(t.plan.cursor, 3);
    assert!(env.app().goal_satisfied(env.state(), "t").unwrap());
    assert_eq!(refine_trajectory(t).unwrap().trajectory, *t);
}

#[tokio::test]
async fn low_score_executes_the_critic_action() {
    let agent = backend(&["SCROLL [UP]", "CLICK <20, 20>", "COMPLETE"]);
    let mut critic = vec!["1. open\n2. pick\n3. finish"];
    critic.extend(critic_step("CLICK <10, 10>", "2", "1", "no"));
    critic.extend(critic_step("CLICK <20, 20>", "5", "2", "no"));
    critic.extend(critic_step("COMPLETE", "5", "3", "yes"));
    let critic = backend(&critic);

    let out =
        probe_instruction(&common::instruction("t"), &agent, &critic, &mut env(), &ProbeCaps::default(), &NoopObserver)
            .await
            .unwrap();
    let s = &out.trajectory.steps[0];
    assert_eq!((s.score, &s.agent_action), (2, &Action::Scroll(stepgate_core::ScrollDir::Up)));
    assert_eq!(s.executed_action, Action::click(10, 10));
    assert_eq!(out.status, ProbeStatus::Finished);
    assert!(out.trajectory.steps.iter().all(|s| validate_step(s).is_empty()));
}

#[tokio::test]
async fn repeated_phase_is_a_retry_then_advances() {
    // The first click misses (no transition), so the critic reports item 0
    // twice before the retry lands.
    let agent = backend(&["CLICK <500, 500>", "CLICK <500, 500>", "CLICK <10, 10>", "CLICK <20, 20>"]);
    let mut critic = vec!["1. open\n2. pick"];
    critic.extend(critic_step("CLICK <500, 500>", "5", "0", "no"));
    critic.extend(critic_step("CLICK <500, 500>", "5", "0", "no"));
    critic.extend(critic_step("CLICK <10, 10>", "5", "1", "no"));
    critic.extend(critic_step("CLICK <20, 20>", "5", "2", "yes"));
    let critic = backend(&critic);

    let out =
        probe_instruction(&common::instruction("t"), &agent, &critic, &mut env(), &ProbeCaps::default(), &NoopObserver)
            .await
            .unwrap();
    assert_eq!(out.status, ProbeStatus::Finished);
    let t = &out.trajectory;
    assert_eq!(t.steps.iter().map(|s| s.plan_item).collect::<Vec<_>>(), vec![0, 0, 0, 1]);
    assert_eq!(t.steps[0].supplementary.as_deref(), Some("no effect"));
    assert_eq!(t.steps[2].supplementary, None);
}

#[tokio::test]
async fn retry_cap_stalls() {
    let agent = backend(&["PRESS_BACK"; 10]);
    let mut critic = vec!["1. open"];
    for _ in 0..10 {
        critic.extend(critic_step("PRESS_BACK", "5", "0", "no"));
    }
    let critic = backend(&critic);
    let out =
        probe_instruction(&common::instruction("t"), &agent, &critic, &mut env(), &ProbeCaps::default(), &NoopObserver)
            .await
            .unwrap();
    // Three retries are allowed; the fourth repeat stops the run.
    assert_eq!(out.status, ProbeStatus::Stalled { plan_item: 0 });
    assert_eq!(out.trajectory.steps.len(), 4);
    assert!(!out.trajectory.finished);
}

#[tokio::test]
async fn step_budget_is_respected() {
    let agent = backend(&["CLICK <10, 10>", "CLICK <20, 20>", "SCROLL [DOWN]"]);
    let mut critic = vec!["1. a\n2. b\n3. c\n4. d"];
    critic.extend(critic_step("CLICK <10, 10>", "5", "1", "no"));
    critic.extend(critic_step("CLICK <20, 20>", "5", "2", "no"));
    critic.extend(critic_step("SCROLL [DOWN]", "5", "3", "no"));
    let critic = backend(&critic);
    let caps = ProbeCaps { max_steps: 3, ..ProbeCaps::default() };
    let out =
        probe_instruction(&common::instruction("t"), &agent, &critic, &mut env(), &caps, &NoopObserver).await.unwrap();
    assert_eq!(out.status, ProbeStatus::BudgetExhausted);
    assert_eq!(out.trajectory.steps.len(), 3);
}

#[tokio::test]
async fn malformed_agent_reply_scores_one() {
    let agent = backend(&["I would tap the icon", "CLICK <20, 20>", "COMPLETE"]);
    let mut critic = vec!["1. open\n2. pick\n3. finish"];
    // No score call for the malformed step.
    critic.extend(["CLICK <10, 10>", "1", "no"]);
    critic.extend(critic_step("CLICK <20, 20>", "5", "2", "no"));
    critic.extend(critic_step("COMPLETE", "5", "3", "yes"));
    let critic = backend(&critic);
    let out =
        probe_instruction(&common::instruction("t"), &agent, &critic, &mut env(), &ProbeCaps::default(), &NoopObserver)
            .await
            .unwrap();
    let s = &out.trajectory.steps[0];
    assert_eq!(s.score, 1);
    assert_eq!(s.agent_action, Action::Impossible);
    assert!(s.agent_error.is_some());
    assert_eq!(s.executed_action, Action::click(10, 10));
    assert_eq!(out.status, ProbeStatus::Finished);
}

#[tokio::test]
async fn exhausted_critic_aborts_with_partial_trajectory() {
    let agent = backend(&["CLICK <10, 10>", "CLICK <20, 20>"]);
    let mut critic = vec!["1. open\n2. pick"];
    critic.extend(critic_step("CLICK <10, 10>", "5", "1", "no"));
    let critic = backend(&critic);
    let out =
        probe_instruction(&common::instruction("t"), &agent, &critic, &mut env(), &ProbeCaps::default(), &NoopObserver)
            .await
            .unwrap();
    assert!(matches!(out.status, ProbeStatus::Aborted { .. }));
    assert_eq!(out.trajectory.steps.len(), 1);
}

#[tokio::test]
async fn demo_pack_probing_is_deterministic_with_one_complex_step() {
    let first = common::probe_demo().await;
    let second = common::probe_demo().await;
    assert_eq!(serde_json::to_string(&first).unwrap(), serde_json::to_string(&second).unwrap());

    assert_eq!(first.len(), 10);
    assert_eq!(first.iter().map(|t| t.steps.len()).sum::<usize>(), 42);
    let low: Vec<_> =
        first.iter().flat_map(|t| t.steps.iter().map(move |s| (t, s))).filter(|(_, s)| s.score < 5).collect();
    assert_eq!(low.len(), 1);
    let (t, s) = low[0];
    assert_eq!(t.instruction.id, "bank-transfer");
    assert_eq!(s.agent_action.to_string(), "SCROLL [UP]");
    assert_eq!(s.executed_action, Action::click(146, 357));
    assert_eq!(s.critic_action.as_ref(), Some(&s.executed_action));

    let app = common::demo_config().load_sim_app().unwrap();
    for t in &first {
        app.verify_trajectory(t).unwrap();
    }
}
