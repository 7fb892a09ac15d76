#![allow(dead_code)]

use std::path::PathBuf;

use stepgate_core::config::RunConfig;
use stepgate_core::env::SimEnv;
use stepgate_core::probing::{probe_instruction, refine_trajectory, NoopObserver, ProbeStatus};
use stepgate_core::{Instruction, Language, Scenario, Trajectory};

pub fn demo_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../demo")
}

pub fn demo_config() -> RunConfig {
    RunConfig::load(&demo_dir().join("config.json")).unwrap()
}

pub fn instruction(id: &str) -> Instruction {
    Instruction {
        id: id.into(),
        text: format!("task {id}"),
        language: Language::En,
        app: "Demo".into(),
        topic: "Test".into(),
        scenario: Scenario::Normal,
    }
}

/// Probes every demo instruction with fresh scripted backends and returns
/// the refined trajectories in instruction order.
pub async fn probe_demo() -> Vec<Trajectory> {
    let cfg = demo_config();
    let app = cfg.load_sim_app().unwrap();
    let agent = cfg.backend("agent").unwrap();
    let critic = cfg.backend("critic").unwrap();
    let mut out = Vec::new();
    for instr in cfg.load_instructions().unwrap() {
        let mut env = SimEnv::new(app.clone());
        let outcome =
            probe_instruction(&instr, &agent, &critic, &mut env, &cfg.probe_caps(), &NoopObserver).await.unwrap();
        assert_eq!(outcome.status, ProbeStatus::Finished, "{}", instr.id);
        out.push(refine_trajectory(&outcome.trajectory).unwrap().trajectory);
    }
    out
}
