//! Run configuration shared by the command line and the service.
//!
//! ```json
//! {
//!   "instructions": "instructions.json",
//!   "vocabulary": {"apps": ["Mail"], "topics": ["Office"]},
//!   "sim_app": "app.json",
//!   "device": "127.0.0.1:7000",
//!   "backends": {
//!     "agent": {"kind": "SCRIPTED", "script_path": "scripts/agent"},
//!     "critic": {"kind": "SCRIPTED", "script_path": "scripts/critic"},
//!     "policy": {"kind": "REMOTE_HTTP", "endpoint": "http://localhost:8000/v1/chat"}
//!   },
//!   "gamma": 4,
//!   "max_steps": 10,
//!   "max_retries_per_plan_item": 3,
//!   "intervention_timeout_secs": 300
//! }
//! ```
//!
//! Relative paths are resolved against the config file's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backends::{Backend, BackendConfig};
use crate::controller::{EpisodeCaps, DEFAULT_GAMMA, DEFAULT_MAX_STEPS};
use crate::env::SimApp;
use crate::error::Error;
use crate::probing::ProbeCaps;
use crate::store::load_instructions;
use crate::types::{Instruction, Vocabulary};

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

fn default_max_steps() -> usize {
    DEFAULT_MAX_STEPS
}

fn default_retry_cap() -> usize {
    3
}

fn default_timeout() -> u64 {
    300
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub instructions: PathBuf,
    #[serde(default)]
    pub vocabulary: Vocabulary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_app: Option<PathBuf>,
    /// `host:port` of a device bridge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<String>,
    /// Named backends; the roles `agent`, `critic` and `policy` are looked up
    /// by name.
    #[serde(default)]
    pub backends: BTreeMap<String, BackendConfig>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_retry_cap")]
    pub max_retries_per_plan_item: usize,
    /// Zero waits forever.
    #[serde(default = "default_timeout")]
    pub intervention_timeout_secs: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(cfg.resolve_paths(base))
    }

    pub fn resolve_paths(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.instructions);
        if let Some(p) = &mut self.sim_app {
            fix(p);
        }
        self.backends =
            std::mem::take(&mut self.backends).into_iter().map(|(name, b)| (name, b.resolve_paths(base))).collect();
        self
    }

    /// Instructions, checked against the vocabulary.
    pub fn load_instructions(&self) -> Result<Vec<Instruction>, Error> {
        let instructions = load_instructions(&self.instructions)?;
        for instr in &instructions {
            instr.validate(&self.vocabulary).map_err(|e| Error::Config(format!("instruction {}: {e}", instr.id)))?;
        }
        Ok(instructions)
    }

    pub fn load_sim_app(&self) -> Result<Arc<SimApp>, Error> {
        let path = self.sim_app.as_ref().ok_or_else(|| Error::Config("no sim_app configured".into()))?;
        Ok(Arc::new(SimApp::load(path)?))
    }

    pub fn backend_config(&self, name: &str) -> Result<&BackendConfig, Error> {
        self.backends.get(name).ok_or_else(|| Error::Config(format!("no backend named {name:?}")))
    }

    /// Builds a fresh backend; scripted backends start from the top of
    /// their scripts.
    pub fn backend(&self, name: &str) -> Result<Backend, Error> {
        Ok(Backend::from_config(self.backend_config(name)?)?)
    }

    pub fn probe_caps(&self) -> ProbeCaps {
        ProbeCaps {
            max_steps: self.max_steps,
            max_retries_per_plan_item: self.max_retries_per_plan_item,
            ..ProbeCaps::default()
        }
    }

    pub fn episode_caps(&self) -> EpisodeCaps {
        EpisodeCaps {
            max_steps: self.max_steps,
            intervention_timeout: (self.intervention_timeout_secs > 0)
                .then(|| Duration::from_secs(self.intervention_timeout_secs)),
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if !(0.0..=6.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 6], got {}", self.gamma)));
        }
        self.probe_caps().validate().map_err(Error::Config)?;
        for (name, b) in &self.backends {
            b.validate().map_err(|e| Error::Config(format!("backend {name}: {e}")))?;
        }
        Ok(())
    }
}
