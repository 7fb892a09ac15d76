//! `stepgate` command line.
//!
//! Results go to stdout as JSON (or a text table for `eval`). Failures print
//! `{"error", "exit_code", "message"}` to stderr and exit with 2 for
//! validation, 3 for backend, 4 for environment and 5 for internal errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use stepgate_core::controller::Mode;
use stepgate_core::{Error, ErrorKind};

#[derive(Debug, Parser)]
#[command(name = "stepgate", version, about = "Confidence-gated GUI agent runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Autonomous,
    Adaptive,
    Interactive,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Autonomous => Mode::Autonomous,
            ModeArg::Adaptive => Mode::Adaptive,
            ModeArg::Interactive => Mode::Interactive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Intervener {
    /// Ask the critic backend named by `--oracle`.
    Oracle,
    /// Replay the recorded actions of `--dataset`.
    GroundTruth,
    /// Run inside the service and wait for an operator.
    Console,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Subset {
    All,
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Probe every instruction with the agent and critic and store the
    /// refined trajectories.
    Probe {
        #[arg(long)]
        config: PathBuf,
        /// Instruction pack overriding the config's.
        #[arg(long)]
        instructions: Option<PathBuf>,
        /// Backend name from the config, or a backend JSON file.
        #[arg(long, default_value = "agent")]
        agent: String,
        #[arg(long, default_value = "critic")]
        critic: String,
        /// `sim` for the config's app, an app JSON file, or `tcp://host:port`
        /// for a device bridge.
        #[arg(long, default_value = "sim")]
        env: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Run one gated episode.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        instruction: String,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, value_enum, default_value = "adaptive")]
        mode: ModeArg,
        #[arg(long, default_value = "policy")]
        policy: String,
        #[arg(long, value_enum, default_value = "oracle")]
        intervene: Intervener,
        #[arg(long, default_value = "critic")]
        oracle: String,
        /// Dataset with the recorded trajectory, for `--intervene ground-truth`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "sim")]
        env: String,
        /// Service root for `--intervene console`.
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        service: String,
        #[arg(long)]
        max_steps: Option<usize>,
        /// Print every event as a JSON line before the result.
        #[arg(long)]
        events: bool,
        /// Append the finished episode to this dataset's episode log.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Replay a dataset against a policy and report accuracy and
    /// intervention metrics.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// Backend name, backend JSON file, or `echo` to replay the recorded
        /// actions at full confidence.
        #[arg(long)]
        policy: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 4.0)]
        gamma: f64,
        #[arg(long, value_enum, default_value = "all")]
        subset: Subset,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Log-normal model and Monte Carlo estimate of the average task success
    /// rate.
    Simulate {
        #[arg(long)]
        u: f64,
        #[arg(long)]
        l: f64,
        #[arg(long)]
        k: u64,
        /// Trajectories per trial.
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the histogram of trial averages as CSV.
        #[arg(long)]
        histogram: Option<PathBuf>,
    },
    /// Record a seeded train/test split in the dataset manifest.
    Split {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Host the episode service.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Dataset counts.
    Stats {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Serve a simulated app over the device bridge protocol.
    Bridge {
        #[arg(long)]
        app: PathBuf,
        #[arg(long, default_value_t = 7000)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

/// A failure with its exit class.
#[derive(Debug)]
pub struct CliError {
    kind: ErrorKind,
    message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Validation, message)
    }
}

impl<E: Into<Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        let e = e.into();
        Self { kind: e.kind(), message: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => return report(CliError::new(ErrorKind::Internal, e.to_string())),
    };
    match runtime.block_on(commands::dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    let code = e.kind.exit_code();
    let body = serde_json::json!({"error": e.kind.as_str(), "exit_code": code, "message": e.message});
    eprintln!("{body}");
    ExitCode::from(code as u8)
}
