//! Exit criteria. Each test prints one `PASS` or `FAIL` line; run with
//! `cargo test -p stepgate-core --test acceptance -- --nocapture --test-threads=1`
//! to see them in order.

mod common;

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stepgate_core::backends::{Backend, ScriptedBackend};
use stepgate_core::controller::{
    replay_static, run_episode, EpisodeCaps, EpisodeSetup, EpisodeStatus, GroundTruthSource, Mode, NoopEpisodeObserver,
};
use stepgate_core::env::SimEnv;
use stepgate_core::metrics::{
    classify_intervention, eval_dataset, evaluate_replay, hsr_ip_ap, relative_efficiency, Confusion, ConfusionCounts,
    EvalStep,
};
use stepgate_core::probing::{probe_instruction, refine_trajectory, NoopObserver};
use stepgate_core::store::Dataset;
use stepgate_core::tsr::mc::{ks_distance, lognormal_cdf, mean_var, sample_tsr, simulate_tsr_mc};
use stepgate_core::tsr::special::{digamma, trigamma};
use stepgate_core::tsr::{beta_log_moments, lognormal_tsr, BetaParams};
use stepgate_core::{
    match_step, parse_action, serialize_action, Action, AnnotatedStep, PayloadRef, PlanSchedule, ScreenDims,
    Screenshot, ScrollDir, Trajectory,
};

fn verdict(criterion: &str, pass: bool, started: Instant, limit: Duration, detail: String) {
    let elapsed = started.elapsed();
    let in_time = elapsed < limit;
    let tag = if pass && in_time { "PASS" } else { "FAIL" };
    println!("{tag} {criterion}: {detail} ({:.2}s, limit {}s)", elapsed.as_secs_f64(), limit.as_secs());
    assert!(pass, "{criterion} failed: {detail}");
    assert!(in_time, "{criterion} took {elapsed:?}, limit {limit:?}");
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(1..=24);
    (0..len)
        .map(|_| loop {
            let c: char = rng.random();
            if c != '\n' && c != '\r' {
                break c;
            }
        })
        .collect()
}

fn random_action(rng: &mut ChaCha8Rng, max_coord: u32) -> Action {
    match rng.random_range(0..7) {
        0 => Action::click(rng.random_range(0..=max_coord), rng.random_range(0..=max_coord)),
        1 => Action::Scroll(ScrollDir::ALL[rng.random_range(0..4)]),
        2 => Action::Type(random_text(rng)),
        3 => Action::PressBack,
        4 => Action::PressHome,
        5 => Action::Complete,
        _ => Action::Impossible,
    }
}

#[test]
fn relative_efficiency_table() {
    let started = Instant::now();
    let pairs = [(229, 302, 75.83), (229, 397, 57.68), (229, 359, 63.79), (229, 245, 93.47), (229, 265, 86.42)];
    let mut worst: f64 = 0.0;
    let mut got = Vec::new();
    for (human, actual, expected) in pairs {
        let pct = 100.0 * relative_efficiency(human, actual).unwrap();
        worst = worst.max((pct - expected).abs());
        got.push(format!("{pct:.2}"));
    }
    let detail = format!("RE = [{}] %, worst deviation {worst:.4} pp (tolerance 0.01)", got.join(", "));
    verdict("relative efficiency", worst <= 0.01, started, Duration::from_secs(1), detail);
}

#[test]
fn metric_formulas() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut problems = Vec::new();

    // Confusion tables: rates against their closed forms.
    for _ in 0..1000 {
        let c = ConfusionCounts {
            tp: rng.random_range(0..30),
            fp: rng.random_range(0..30),
            tn: rng.random_range(0..30),
            fn_: rng.random_range(0..30),
        };
        let frac = |n: usize, d: usize| if d == 0 { None } else { Some(n as f64 / d as f64) };
        let r = hsr_ip_ap(c);
        let expected =
            (frac(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn_), frac(c.tn, c.tn + c.fn_), frac(c.tp, c.tp + c.fp));
        if (r.hsr, r.ip, r.ap) != expected {
            problems.push(format!("rates of {c:?}"));
        }
        if let Some(hsr) = r.hsr {
            if (hsr == 1.0) != (c.fp == 0 && c.fn_ == 0) {
                problems.push(format!("HSR = 1 iff FP = FN = 0 broken by {c:?}"));
            }
        }
    }

    // Score tables: the gate on the prediction against the gate on the truth.
    for _ in 0..1000 {
        let gamma = if rng.random_bool(0.5) { rng.random_range(0..=6) as f64 } else { rng.random_range(0.0..=6.0) };
        let n = rng.random_range(1..50);
        let (mut counts, mut expected) = (ConfusionCounts::default(), [0usize; 4]);
        for _ in 0..n {
            let (pred, gt) = (rng.random_range(1..=5u8), rng.random_range(1..=5u8));
            counts.add(classify_intervention(pred, gt, gamma));
            // Intervening is the negative class.
            let (pred_intervenes, gt_intervenes) = (f64::from(pred) < gamma, f64::from(gt) < gamma);
            let slot = match (pred_intervenes, gt_intervenes) {
                (false, false) => 0,
                (false, true) => 1,
                (true, true) => 2,
                (true, false) => 3,
            };
            expected[slot] += 1;
        }
        if [counts.tp, counts.fp, counts.tn, counts.fn_] != expected {
            problems.push(format!("confusion at gamma {gamma}: {counts:?} vs {expected:?}"));
        }
    }
    assert_eq!(classify_intervention(5, 2, 4.0), Confusion::Fp);

    // Random datasets: trajectory lengths, screen widths and the per-dataset
    // hit rate all vary.
    let (mut sr_over_type, mut tsr_over_sr) = (0, 0);
    let mut example = None;
    for _ in 0..1000 {
        let hit = rng.random_range(0.0..=1.0);
        let trajectories: Vec<Vec<EvalStep>> = (0..rng.random_range(1..=12))
            .map(|_| {
                let dims = ScreenDims::new(rng.random_range(100..=2000), 2400).unwrap();
                (0..rng.random_range(1..=10))
                    .map(|_| {
                        let gt = random_action(&mut rng, 2000);
                        let pred = if rng.random_bool(hit) { gt.clone() } else { random_action(&mut rng, 2000) };
                        EvalStep { pred, gt, dims }
                    })
                    .collect()
            })
            .collect();
        let r = eval_dataset(&trajectories).unwrap();
        if r.sr() > r.type_rate() {
            sr_over_type += 1;
        }
        if r.tsr() > r.sr() {
            tsr_over_sr += 1;
            example.get_or_insert_with(|| {
                let lens: Vec<usize> = trajectories.iter().map(Vec::len).collect();
                format!("lengths {lens:?}, TSR {:.3} > SR {:.3}", r.tsr(), r.sr())
            });
        }
    }
    if sr_over_type > 0 {
        problems.push(format!("SR > Type on {sr_over_type} datasets"));
    }
    if tsr_over_sr > 0 {
        problems.push(format!("TSR > SR on {tsr_over_sr} of 1000 datasets, e.g. {}", example.unwrap()));
    }
    let detail = if problems.is_empty() {
        "1000 rate tables, 1000 score tables, 1000 datasets consistent".to_string()
    } else {
        problems.join("; ")
    };
    verdict("metric formulas", problems.is_empty(), started, Duration::from_secs(10), detail);
}

#[test]
fn codec_round_trip() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = Vec::new();
    let mut kinds = BTreeSet::new();
    for _ in 0..20_000 {
        let a = random_action(&mut rng, u32::MAX);
        kinds.insert(a.kind().verb());
        match parse_action(&serialize_action(&a)) {
            Ok(b) if b == a => {}
            other => failures.push(format!("{a:?} -> {other:?}")),
        }
    }

    let dims = |w| ScreenDims::new(w, 2000).unwrap();
    let full =
        |a: (u32, u32), b: (u32, u32), w| match_step(&Action::click(a.0, a.1), &Action::click(b.0, b.1), dims(w));
    // Exactly 0.14 * width apart, along an axis and along a 3-4-5 diagonal.
    let boundary = [
        (full((0, 0), (140, 0), 1000).full_match, true),
        (full((0, 0), (141, 0), 1000).full_match, false),
        (full((100, 100), (142, 156), 500).full_match, true),
        (full((100, 100), (143, 156), 500).full_match, false),
        (full((0, 0), (0, 350), 2500).full_match, true),
        (full((0, 0), (0, 351), 2500).full_match, false),
    ];
    let boundary_ok = boundary.iter().all(|(got, want)| got == want);
    if !boundary_ok {
        failures.push(format!("boundary cases {boundary:?}"));
    }
    let pass = failures.is_empty() && kinds.len() == 7;
    let detail = if pass {
        "20000 actions over all 7 kinds round-trip; 0.14 x width boundary matches, one pixel beyond does not".into()
    } else {
        format!("{} failures, first {:?}", failures.len(), failures.first())
    };
    verdict("codec round-trip", pass, started, Duration::from_secs(5), detail);
}

#[test]
fn beta_model_identities() {
    let started = Instant::now();
    let mut worst_recurrence: f64 = 0.0;
    for i in 1..=2000 {
        let x = i as f64 * 0.025;
        let d = digamma(x + 1.0).unwrap() - digamma(x).unwrap() - 1.0 / x;
        let t = trigamma(x + 1.0).unwrap() - trigamma(x).unwrap() + 1.0 / (x * x);
        worst_recurrence = worst_recurrence.max(d.abs()).max(t.abs());
    }
    let moments = beta_log_moments(BetaParams::new(1.0, 1.0).unwrap()).unwrap();

    let mut outside = Vec::new();
    for u in 1..=9 {
        for l in 1..=9 {
            let b = BetaParams::new(u as f64, l as f64).unwrap();
            for k in [1u64, 2, 5, 10] {
                let samples = sample_tsr(b, k, 100_000, 7).unwrap();
                let (mean, var) = mean_var(&samples);
                let se = (var / samples.len() as f64).sqrt();
                let expected = b.mean().powi(k as i32);
                if (mean - expected).abs() > 3.0 * se {
                    outside.push(format!("(u={u}, l={l}, k={k}) off by {:.2} SE", (mean - expected).abs() / se));
                }
            }
        }
    }
    let pass = worst_recurrence <= 1e-10 && moments == (-1.0, 1.0) && outside.is_empty();
    let detail = format!(
        "recurrence error {worst_recurrence:.2e} (limit 1e-10); Beta(1,1) log moments {moments:?}; {} of 324 MC means \
         outside 3 SE{}",
        outside.len(),
        if outside.is_empty() { String::new() } else { format!(": {}", outside.join(", ")) }
    );
    verdict("beta model identities", pass, started, Duration::from_secs(60), detail);
}

#[test]
fn lognormal_approximation() {
    let started = Instant::now();
    let mut worst = (0.0, 0, 0, 0);
    let mut over = Vec::new();
    for u in 5..=9 {
        for l in 5..=9 {
            let b = BetaParams::new(u as f64, l as f64).unwrap();
            for k in 1..=10u64 {
                let model = lognormal_tsr(b, k).unwrap();
                let samples = sample_tsr(b, k, 100_000, 7).unwrap();
                let ks = ks_distance(&samples, |x| lognormal_cdf(x, model.log_mean, model.log_var));
                if ks > worst.0 {
                    worst = (ks, u, l, k);
                }
                if ks > 0.05 {
                    over.push(format!("(u={u}, l={l}, k={k}) {ks:.4}"));
                }
            }
        }
    }

    let autonomous = simulate_tsr_mc(BetaParams::new(2.0, 2.0).unwrap(), 8, 100, 10_000, 7).unwrap();
    let interactive = simulate_tsr_mc(BetaParams::new(95.0, 5.0).unwrap(), 8, 100, 10_000, 7).unwrap();
    let claims = autonomous.mean < 0.05 && interactive.mean > 0.6;

    let pass = over.is_empty() && claims;
    let detail = format!(
        "worst KS {:.4} at (u={}, l={}, k={}), {} of 250 cells above 0.05{}; autonomous Beta(2,2) k=8 TSR_avg {:.4} \
         (< 0.05), interactive Beta(95,5) k=8 TSR_avg {:.4} (> 0.6)",
        worst.0,
        worst.1,
        worst.2,
        worst.3,
        over.len(),
        if over.is_empty() { String::new() } else { format!(" [{}]", over.join(", ")) },
        autonomous.mean,
        interactive.mean,
    );
    verdict("log-normal approximation", pass, started, Duration::from_secs(120), detail);
}

#[tokio::test]
async fn probing_is_deterministic() {
    let started = Instant::now();
    let cfg = common::demo_config();
    let app = cfg.load_sim_app().unwrap();
    let mut files = Vec::new();
    let mut low = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let store = Dataset::open(dir.path()).unwrap();
        low.clear();
        for instr in cfg.load_instructions().unwrap() {
            let (agent, critic) = (cfg.backend("agent").unwrap(), cfg.backend("critic").unwrap());
            let mut env = SimEnv::new(app.clone());
            let out =
                probe_instruction(&instr, &agent, &critic, &mut env, &cfg.probe_caps(), &NoopObserver).await.unwrap();
            let refined = refine_trajectory(&out.trajectory).unwrap().trajectory;
            for s in refined.steps.iter().filter(|s| s.score < 5) {
                low.push((instr.id.clone(), s.clone()));
            }
            store.save_trajectory(&refined).unwrap();
        }
        files.push(std::fs::read(dir.path().join("trajectories.jsonl")).unwrap());
    }
    let bundled = std::fs::read(common::demo_dir().join("dataset/trajectories.jsonl")).unwrap();
    let identical = files[0] == files[1] && files[0] == bundled;
    let single = match low.as_slice() {
        [(id, s)] => {
            id == "bank-transfer"
                && Some(&s.executed_action) == s.critic_action.as_ref()
                && s.executed_action != s.agent_action
        }
        _ => false,
    };
    let detail = format!(
        "two probes byte-identical (and equal to the bundled dataset): {identical}; low-score steps {:?}",
        low.iter()
            .map(|(id, s)| format!("{id}#{} score {} ran {}", s.index, s.score, s.executed_action))
            .collect::<Vec<_>>()
    );
    verdict("probing determinism", identical && single, started, Duration::from_secs(10), detail);
}

#[tokio::test]
async fn gate_limits_and_monotonicity() {
    let started = Instant::now();
    let cfg = common::demo_config();
    let app = cfg.load_sim_app().unwrap();
    let dataset = common::probe_demo().await;
    let truth = Arc::new(GroundTruthSource::from_trajectories(&dataset));
    let caps = EpisodeCaps { max_steps: cfg.max_steps, intervention_timeout: None };
    let mut problems = Vec::new();

    let mut episode_counts = Vec::new();
    for gamma in 0..=6 {
        let mut total = 0;
        for traj in &dataset {
            let setup = EpisodeSetup {
                episode_id: format!("ep-{gamma}"),
                instruction: &traj.instruction,
                mode: Mode::Adaptive,
                gamma: gamma as f64,
                caps: caps.clone(),
                plan_item: None,
            };
            let policy = cfg.backend("policy").unwrap();
            let r =
                run_episode(setup, &policy, &mut SimEnv::new(app.clone()), truth.clone(), &NoopEpisodeObserver).await;
            let id = &traj.instruction.id;
            if gamma == 0 && r.interventions != 0 {
                problems.push(format!("{id}: {} interventions at gamma 0", r.interventions));
            }
            if gamma == 6 && (r.interventions != r.state.history.len() || r.state.status != EpisodeStatus::DoneComplete)
            {
                problems.push(format!(
                    "{id}: {} interventions over {} steps at gamma 6, {:?}",
                    r.interventions,
                    r.state.history.len(),
                    r.state.status
                ));
            }
            total += r.interventions;
        }
        episode_counts.push(total);
    }

    let mut replay_counts = Vec::new();
    for gamma in 0..=6 {
        let records = replay_static(&dataset, &cfg.backend("policy").unwrap(), gamma as f64).await.unwrap();
        replay_counts.push(evaluate_replay(&records, gamma as f64).unwrap().interventions);
    }
    let steps: usize = dataset.iter().map(|t| t.steps.len()).sum();
    for (name, counts) in [("episode", &episode_counts), ("replay", &replay_counts)] {
        if !counts.windows(2).all(|w| w[0] <= w[1]) {
            problems.push(format!("{name} counts not monotone: {counts:?}"));
        }
    }
    if replay_counts[0] != 0 || replay_counts[6] != steps {
        problems.push(format!("replay limits {replay_counts:?} over {steps} steps"));
    }
    let detail = if problems.is_empty() {
        format!("interventions by gamma 0..6: episodes {episode_counts:?}, replay {replay_counts:?} of {steps} steps")
    } else {
        problems.join("; ")
    };
    verdict("controller gate", problems.is_empty(), started, Duration::from_secs(10), detail);
}

/// Ten-step trajectories of clicks on a 1000-wide screen.
fn synthetic_dataset(rng: &mut ChaCha8Rng, n: usize) -> Vec<Trajectory> {
    let dims = ScreenDims::new(1000, 2000).unwrap();
    (0..n)
        .map(|i| {
            let mut instruction = common::instruction(&format!("syn-{i}"));
            instruction.text = "synthetic".into();
            let steps = (0..10)
                .map(|t| {
                    let action = Action::click(rng.random_range(0..1000), rng.random_range(0..2000));
                    AnnotatedStep {
                        index: t,
                        screenshot: Screenshot {
                            id: format!("syn-{i}@{t}"),
                            dims,
                            payload_ref: PayloadRef::inline_text(&format!("{i}/{t}")),
                        },
                        agent_action: action.clone(),
                        agent_error: None,
                        critic_action: Some(action.clone()),
                        score: 5,
                        executed_action: action,
                        plan_item: 0,
                        supplementary: None,
                    }
                })
                .collect();
            Trajectory { instruction, steps, finished: true, plan: PlanSchedule::new(vec!["finish".into()]) }
        })
        .collect()
}

#[tokio::test]
async fn exponential_decay_is_recovered_by_gating() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dataset = synthetic_dataset(&mut rng, 5000);
    let mut replies = Vec::with_capacity(50_000);
    for traj in &dataset {
        for step in &traj.steps {
            let reply = if rng.random_bool(0.6) {
                format!("ACTION: {}\nSCORE: 5", step.executed_action)
            } else {
                let Action::Click(p) = &step.executed_action else { unreachable!() };
                // Half a screen away, far outside the match radius.
                let wrong = Action::click((p.x + 500) % 1000, p.y);
                let score = if rng.random_bool(0.95) { rng.random_range(1..=3) } else { 5 };
                format!("ACTION: {wrong}\nSCORE: {score}")
            };
            replies.push(reply);
        }
    }
    let policy = Backend::scripted(ScriptedBackend::from_replies(replies)).with_retries(0).with_backoff(Duration::ZERO);
    let records = replay_static(&dataset, &policy, 4.0).await.unwrap();
    let r = evaluate_replay(&records, 4.0).unwrap();
    let (static_sr, static_tsr, gated_tsr) = (r.static_eval.sr(), r.static_eval.tsr(), r.gated_eval.tsr());
    let pass = static_tsr < 0.01 && gated_tsr > 0.6;
    let detail = format!(
        "static SR {static_sr:.3}, static TSR {:.2}% (< 1%), gated TSR at gamma 4 {:.1}% (> 60%), {} interventions",
        100.0 * static_tsr,
        100.0 * gated_tsr,
        r.interventions
    );
    verdict("exponential decay", pass, started, Duration::from_secs(10), detail);
}
