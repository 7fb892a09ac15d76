use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::Serialize;
use serde_json::json;
use stepgate_client::{Client, ClientError};
use stepgate_core::api::{CreateEpisode, EnvKind, EventFrame};
use stepgate_core::backends::{Backend, BackendConfig, ScriptedBackend};
use stepgate_core::config::RunConfig;
use stepgate_core::controller::{
    replay_static, run_episode, EpisodeEvent, EpisodeFailure, EpisodeObserver, EpisodeResult, EpisodeSetup,
    EpisodeState, GroundTruthSource, InterventionSource, Mode, NoopEpisodeObserver, OracleSource,
};
use stepgate_core::env::{serve_sim_bridge, DeviceBridge, EnvError, Environment, SimApp, SimEnv};
use stepgate_core::metrics::{evaluate_replay, split_dataset};
use stepgate_core::probing::{probe_instruction, refine_trajectory, NoopObserver, ProbeError, ProbeStatus};
use stepgate_core::store::{dataset_stats, Dataset, Split};
use stepgate_core::tsr::{lognormal_tsr, simulate_tsr_mc, tsr_avg_normal, BetaParams, HISTOGRAM_BINS};
use stepgate_core::{Error, ErrorKind, Trajectory};
use tokio::net::{TcpListener, TcpStream};

use crate::{CliError, Command, Intervener, Subset};

type Result<T> = std::result::Result<T, CliError>;

pub async fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Probe { config, instructions, agent, critic, env, out, max_steps } => {
            let mut cfg = load_config(&config)?;
            if let Some(path) = instructions {
                cfg.instructions = path;
            }
            if let Some(m) = max_steps {
                cfg.max_steps = m;
            }
            probe(&cfg, &agent, &critic, &env, &out).await
        }
        Command::Run {
            config,
            instruction,
            gamma,
            mode,
            policy,
            intervene,
            oracle,
            dataset,
            env,
            service,
            max_steps,
            events,
            record,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(g) = gamma {
                cfg.gamma = g;
            }
            if let Some(m) = max_steps {
                cfg.max_steps = m;
            }
            cfg.validate()?;
            let run = RunArgs {
                instruction_id: instruction,
                mode: mode.into(),
                policy,
                oracle,
                dataset: dataset.as_deref(),
                env,
                events,
            };
            let result = match intervene {
                Intervener::Console => run_on_service(&cfg, &run, &service).await?,
                other => run_local(&cfg, &run, other).await?,
            };
            if let Some(path) = record {
                Dataset::open(path)?.append_episode(&result)?;
            }
            print_json(&result);
            match result.state.failure {
                None => Ok(()),
                Some(EpisodeFailure::Backend(m)) => Err(CliError::new(ErrorKind::Backend, m)),
                Some(EpisodeFailure::Environment(m)) => Err(CliError::new(ErrorKind::Environment, m)),
                Some(other) => Err(CliError::new(ErrorKind::Internal, other.to_string())),
            }
        }
        Command::Eval { dataset, policy, config, gamma, subset, json } => {
            eval(&dataset, &policy, config.as_deref(), gamma, subset, json.as_deref()).await
        }
        Command::Simulate { u, l, k, n, trials, seed, histogram } => {
            simulate(u, l, k, n, trials, seed, histogram.as_deref())
        }
        Command::Split { dataset, ratio, seed } => {
            let ds = Dataset::open(dataset)?;
            let (train_ids, test_ids) = split_dataset(&ds.ids()?, ratio, seed)?;
            let split = Split { train_ids, test_ids, seed };
            ds.write_split(split.clone())?;
            print_json(&json!({"train": split.train_ids.len(), "test": split.test_ids.len(), "split": split}));
            Ok(())
        }
        Command::Serve { config, port, host } => {
            let cfg = load_config(&config)?;
            let state = stepgate_service::AppState::new(cfg)?;
            init_logging();
            let listener = bind(&host, port).await?;
            stepgate_service::serve(listener, state)
                .await
                .map_err(|e| CliError::new(ErrorKind::Internal, e.to_string()))
        }
        Command::Stats { dataset } => stats(&dataset),
        Command::Bridge { app, port, host } => {
            let app = Arc::new(SimApp::load(&app)?);
            let listener = bind(&host, port).await?;
            loop {
                let (stream, _) = listener.accept().await.map_err(|e| CliError::from(EnvError::from(e)))?;
                let env = SimEnv::new(app.clone());
                tokio::spawn(async move {
                    if let Err(e) = serve_sim_bridge(stream, env).await {
                        eprintln!("{}", json!({"bridge_error": e.to_string()}));
                    }
                });
            }
        }
    }
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("results serialize"));
}

fn init_logging() {
    use tracing_subscriber::EnvFilter;
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
}

/// Binds and announces the bound address on stdout.
async fn bind(host: &str, port: u16) -> Result<TcpListener> {
    let listener = TcpListener::bind((host, port)).await.map_err(|e| CliError::from(EnvError::from(e)))?;
    let addr = listener.local_addr().map_err(|e| CliError::new(ErrorKind::Internal, e.to_string()))?;
    println!("{}", json!({"listening": addr.to_string()}));
    Ok(listener)
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

/// A backend named in the config, or a backend JSON file.
fn backend(cfg: Option<&RunConfig>, spec: &str) -> Result<Backend> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = fs::read_to_string(path).map_err(|e| CliError::validation(format!("{spec}: {e}")))?;
        let parsed: BackendConfig =
            serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{spec}: {e}")))?;
        let parsed = parsed.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        return Ok(Backend::from_config(&parsed).map_err(Error::from)?);
    }
    let cfg = cfg.ok_or_else(|| CliError::validation(format!("{spec:?} is not a file and no --config was given")))?;
    Ok(cfg.backend(spec)?)
}

enum EnvSpec {
    Sim(Arc<SimApp>),
    Device(String),
}

impl EnvSpec {
    fn parse(spec: &str, cfg: &RunConfig) -> Result<Self> {
        Ok(if spec == "sim" {
            EnvSpec::Sim(cfg.load_sim_app()?)
        } else if let Some(addr) = spec.strip_prefix("tcp://") {
            EnvSpec::Device(addr.to_string())
        } else if spec == "device" {
            EnvSpec::Device(cfg.device.clone().ok_or_else(|| CliError::validation("no device in the config"))?)
        } else {
            EnvSpec::Sim(Arc::new(SimApp::load(Path::new(spec))?))
        })
    }

    async fn open(&self) -> Result<Box<dyn Environment>> {
        Ok(match self {
            EnvSpec::Sim(app) => Box::new(SimEnv::new(app.clone())),
            EnvSpec::Device(addr) => {
                let stream = TcpStream::connect(addr).await.map_err(|e| CliError::from(EnvError::from(e)))?;
                Box::new(DeviceBridge::new(stream))
            }
        })
    }
}

async fn probe(cfg: &RunConfig, agent: &str, critic: &str, env: &str, out: &Path) -> Result<()> {
    cfg.validate()?;
    let instructions = cfg.load_instructions()?;
    let agent = backend(Some(cfg), agent)?;
    let critic = backend(Some(cfg), critic)?;
    let env = EnvSpec::parse(env, cfg)?;
    let ds = Dataset::open(out)?;
    let caps = cfg.probe_caps();

    let (mut saved, mut rejected, mut unfinished) = (Vec::new(), Vec::new(), Vec::new());
    for instr in &instructions {
        let mut device = env.open().await?;
        let outcome = match probe_instruction(instr, &agent, &critic, device.as_mut(), &caps, &NoopObserver).await {
            Ok(o) => o,
            Err(ProbeError::Env(e)) => {
                unfinished
                    .push(json!({"instruction_id": instr.id, "status": {"kind": "ABORTED", "reason": e.to_string()}}));
                continue;
            }
            Err(e) => return Err(CliError::validation(e.to_string())),
        };
        if outcome.status != ProbeStatus::Finished {
            unfinished.push(json!({
                "instruction_id": instr.id,
                "status": outcome.status,
                "steps": outcome.trajectory.steps.len(),
            }));
            continue;
        }
        match refine_trajectory(&outcome.trajectory) {
            Ok(r) => {
                let id = ds.save_trajectory(&r.trajectory)?;
                saved.push(json!({
                    "instruction_id": instr.id,
                    "id": id,
                    "steps": r.trajectory.steps.len(),
                    "rewritten": r.rewritten.len(),
                    "dropped": r.dropped.len(),
                }));
            }
            Err(rej) => rejected.push(json!({"instruction_id": instr.id, "reasons": rej.reasons})),
        }
    }
    print_json(&json!({
        "dataset": out,
        "instructions": instructions.len(),
        "saved": saved,
        "rejected": rejected,
        "unfinished": unfinished,
        "counts": ds.stats()?,
    }));
    Ok(())
}

struct RunArgs<'a> {
    instruction_id: String,
    mode: Mode,
    policy: String,
    oracle: String,
    dataset: Option<&'a Path>,
    env: String,
    events: bool,
}

/// Prints each event as one JSON line.
#[derive(Default)]
struct PrintEvents {
    seq: AtomicU64,
}

impl EpisodeObserver for PrintEvents {
    fn on_event(&self, event: &EpisodeEvent, _: &EpisodeState) {
        let seq = self.seq.fetch_add(1, Ordering::Relaxed) + 1;
        let frame = EventFrame { seq, event: event.clone() };
        println!("{}", serde_json::to_string(&frame).expect("events serialize"));
    }
}

async fn run_local(cfg: &RunConfig, run: &RunArgs<'_>, intervene: Intervener) -> Result<EpisodeResult> {
    let instructions = cfg.load_instructions()?;
    let instruction = instructions
        .iter()
        .find(|i| i.id == run.instruction_id)
        .ok_or_else(|| CliError::validation(format!("unknown instruction {:?}", run.instruction_id)))?;
    let policy = backend(Some(cfg), &run.policy)?;
    let source: Arc<dyn InterventionSource> = match intervene {
        Intervener::Oracle => Arc::new(OracleSource::new(backend(Some(cfg), &run.oracle)?)),
        Intervener::GroundTruth => {
            let path = run.dataset.ok_or_else(|| CliError::validation("--intervene ground-truth needs --dataset"))?;
            let trajectories = Dataset::open(path)?.load_all()?;
            Arc::new(GroundTruthSource::from_trajectories(trajectories.iter().map(|(_, t)| t)))
        }
        Intervener::Console => unreachable!("console episodes run in the service"),
    };
    let mut env = EnvSpec::parse(&run.env, cfg)?.open().await?;
    let setup = EpisodeSetup {
        episode_id: format!("run-{}", instruction.id),
        instruction,
        mode: run.mode,
        gamma: cfg.gamma,
        caps: cfg.episode_caps(),
        plan_item: None,
    };
    let printer = PrintEvents::default();
    let observer: &dyn EpisodeObserver = if run.events { &printer } else { &NoopEpisodeObserver };
    Ok(run_episode(setup, &policy, env.as_mut(), source, observer).await)
}

fn client_error(e: ClientError) -> CliError {
    match e.status() {
        Some(400..=499) => CliError::validation(e.to_string()),
        _ => CliError::new(ErrorKind::Internal, e.to_string()),
    }
}

async fn run_on_service(cfg: &RunConfig, run: &RunArgs<'_>, service: &str) -> Result<EpisodeResult> {
    let env = match run.env.as_str() {
        "sim" => EnvKind::Sim,
        "device" => EnvKind::Device,
        other => return Err(CliError::validation(format!("console episodes use sim or device, not {other:?}"))),
    };
    let client = Client::new(service);
    let body = CreateEpisode {
        instruction_id: run.instruction_id.clone(),
        mode: run.mode,
        gamma: Some(cfg.gamma),
        env,
        policy_backend: run.policy.clone(),
        oracle_backend: None,
        max_steps: Some(cfg.max_steps),
    };
    let id = client.create_episode(&body).await.map_err(client_error)?;
    eprintln!("{}", json!({"episode_id": id, "service": service}));
    let mut stream = client.subscribe(&id, 0);
    while let Some(frame) = stream.next().await {
        let frame = frame.map_err(client_error)?;
        if run.events {
            println!("{}", serde_json::to_string(&frame).expect("events serialize"));
        }
    }
    let state = client.episode(&id).await.map_err(client_error)?;
    Ok(EpisodeResult { autonomous_steps: state.autonomous_steps(), interventions: state.interventions(), state })
}

/// Replays the recorded executed actions at full confidence.
fn echo_policy(trajectories: &[Trajectory]) -> Backend {
    let mut queues: HashMap<String, Vec<String>> = HashMap::new();
    for t in trajectories {
        let queue = queues.entry(t.instruction.id.clone()).or_default();
        queue.extend(t.steps.iter().map(|s| format!("ACTION: {}\nSCORE: 5", s.executed_action)));
    }
    Backend::scripted(ScriptedBackend::per_instruction(queues)).with_retries(0)
}

async fn eval(
    dataset: &Path,
    policy: &str,
    config: Option<&Path>,
    gamma: f64,
    subset: Subset,
    json_out: Option<&Path>,
) -> Result<()> {
    if !(0.0..=6.0).contains(&gamma) {
        return Err(CliError::validation(format!("gamma must lie in [0, 6], got {gamma}")));
    }
    let ds = Dataset::open(dataset)?;
    let mut records = ds.load_all()?;
    if subset != Subset::All {
        let split = ds.manifest()?.split.ok_or_else(|| CliError::validation("dataset has no split; run `split`"))?;
        let keep = if subset == Subset::Train { split.train_ids } else { split.test_ids };
        records.retain(|(id, _)| keep.contains(id));
    }
    let trajectories: Vec<Trajectory> = records.into_iter().map(|(_, t)| t).collect();
    let policy = if policy == "echo" {
        echo_policy(&trajectories)
    } else {
        let cfg = config.map(load_config).transpose()?;
        backend(cfg.as_ref(), policy)?
    };
    let replay = replay_static(&trajectories, &policy, gamma).await.map_err(Error::from)?;
    let report = evaluate_replay(&replay, gamma)?;
    println!("{report}");
    if let Some(path) = json_out {
        let text = serde_json::to_string_pretty(&report).expect("reports serialize");
        fs::write(path, text + "\n")
            .map_err(|e| CliError::new(ErrorKind::Internal, format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn simulate(u: f64, l: f64, k: u64, n: usize, trials: usize, seed: u64, histogram: Option<&Path>) -> Result<()> {
    let b = BetaParams::new(u, l)?;
    let model = lognormal_tsr(b, k)?;
    let (avg_mean, avg_var) = tsr_avg_normal(b, k, n as u64)?;
    let mc = simulate_tsr_mc(b, k, n, trials, seed)?;
    if let Some(path) = histogram {
        let mut csv = String::from("bin_lo,bin_hi,count\n");
        for (i, count) in mc.histogram.iter().enumerate() {
            let lo = i as f64 / HISTOGRAM_BINS as f64;
            csv.push_str(&format!("{lo:.2},{:.2},{count}\n", lo + 1.0 / HISTOGRAM_BINS as f64));
        }
        fs::write(path, csv).map_err(|e| CliError::new(ErrorKind::Internal, format!("{}: {e}", path.display())))?;
    }
    print_json(&json!({
        "beta": {"u": u, "l": l, "step_mean": b.mean()},
        "k": k,
        "n": n,
        "trials": trials,
        "seed": seed,
        "model": {
            "log_mean": model.log_mean,
            "log_var": model.log_var,
            "mean": model.mean,
            "var": model.var,
            "avg_mean": avg_mean,
            "avg_var": avg_var,
        },
        "monte_carlo": {
            "mean": mc.mean,
            "var": mc.var,
            "std_error": mc.std_error,
            "quantiles": {"p05": mc.quantiles[0], "p25": mc.quantiles[1], "p50": mc.quantiles[2],
                          "p75": mc.quantiles[3], "p95": mc.quantiles[4]},
        },
        "histogram": histogram,
    }));
    Ok(())
}

fn stats(dataset: &Path) -> Result<()> {
    let counts = dataset_stats(dataset)?;
    if counts.trajectories == 0 {
        print_json(&json!({"counts": counts}));
        return Ok(());
    }
    let ds = Dataset::open(dataset)?;
    let (mut by_app, mut by_scenario) = (BTreeMap::<String, usize>::new(), BTreeMap::<String, usize>::new());
    for (_, t) in ds.load_all()? {
        *by_app.entry(t.instruction.app.clone()).or_default() += 1;
        let scenario = serde_json::to_value(t.instruction.scenario).expect("scenarios serialize");
        *by_scenario.entry(scenario.as_str().unwrap_or_default().to_string()).or_default() += 1;
    }
    let manifest = ds.manifest()?;
    print_json(&json!({
        "counts": counts,
        "by_app": by_app,
        "by_scenario": by_scenario,
        "split": manifest.split.map(|s| json!({"train": s.train_ids.len(), "test": s.test_ids.len(), "seed": s.seed})),
    }));
    Ok(())
}
