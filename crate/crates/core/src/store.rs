//! On-disk datasets.
//!
//! A dataset directory holds:
//!
//! - `trajectories.jsonl`: one `{"id": ..., "trajectory": ...}` object per
//!   line, append-only;
//! - `screens/<sha256>.bin`: inline screenshot payloads, content-addressed;
//! - `manifest.json`: name, creation time, counts and an optional split;
//! - `episodes.jsonl`: results of live episodes, append-only.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::IgnoredAny;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::types::{validate_step, Instruction, PayloadRef, Trajectory};

pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCREENS_DIR: &str = "screens";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("trajectory failed validation: {}", .0.join("; "))]
    ValidationFailed(Vec<String>),
    #[error("corrupt record at {path}:{line}: {reason}")]
    CorruptRecord { path: PathBuf, line: usize, reason: String },
    #[error("no trajectory {0:?}")]
    NotFound(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub trajectories: usize,
    /// Total steps, one screenshot each.
    pub screens: usize,
    /// Distinct instruction ids.
    pub goals: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub created_at: String,
    pub counts: Counts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Serialize, Deserialize)]
struct Record<T> {
    id: String,
    trajectory: T,
}

#[derive(Deserialize)]
struct Shallow {
    instruction: ShallowInstruction,
    steps: Vec<IgnoredAny>,
}

#[derive(Deserialize)]
struct ShallowInstruction {
    id: String,
}

/// Handle on one dataset directory. Appends are serialized; readers can
/// open the files independently.
pub struct Dataset {
    root: PathBuf,
    writer: Mutex<()>,
}

impl Dataset {
    /// Opens `root`, creating an empty dataset there if needed.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let screens = root.join(SCREENS_DIR);
        fs::create_dir_all(&screens).map_err(io_err(&screens))?;
        let ds = Self { root, writer: Mutex::new(()) };
        if !ds.manifest_path().exists() {
            let name =
                ds.root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
            let manifest = DatasetManifest {
                name,
                created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                counts: Counts::default(),
                split: None,
            };
            ds.write_manifest(&manifest)?;
        }
        Ok(ds)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    fn log_path(&self) -> PathBuf {
        self.root.join(TRAJECTORIES_FILE)
    }

    pub fn manifest(&self) -> Result<DatasetManifest, StoreError> {
        let path = self.manifest_path();
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| StoreError::Format { path, reason: e.to_string() })
    }

    fn write_manifest(&self, manifest: &DatasetManifest) -> Result<(), StoreError> {
        let path = self.manifest_path();
        let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(io_err(&path))
    }

    /// Validates, externalizes inline screenshots and appends `traj`.
    /// Returns the new id.
    pub fn save_trajectory(&self, traj: &Trajectory) -> Result<String, StoreError> {
        let mut problems: Vec<String> = traj
            .steps
            .iter()
            .flat_map(|s| validate_step(s).into_iter().map(move |v| format!("step {}: {v}", s.index)))
            .collect();
        problems.extend(traj.structural_problems());
        if !problems.is_empty() {
            return Err(StoreError::ValidationFailed(problems));
        }

        let _guard = self.writer.lock().expect("dataset writer lock");
        let mut stored = traj.clone();
        for step in &mut stored.steps {
            if let PayloadRef::Inline(bytes) = &step.screenshot.payload_ref {
                step.screenshot.payload_ref = PayloadRef::Blob(self.put_blob(bytes)?);
            }
        }
        let id = format!("traj-{:06}", self.scan()?.0.len() + 1);
        let mut line = serde_json::to_string(&Record { id: id.clone(), trajectory: &stored }).expect("serializes");
        line.push('\n');
        let path = self.log_path();
        let mut file = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        file.write_all(line.as_bytes()).map_err(io_err(&path))?;

        let mut manifest = self.manifest()?;
        manifest.counts = self.stats()?;
        self.write_manifest(&manifest)?;
        Ok(id)
    }

    fn put_blob(&self, bytes: &[u8]) -> Result<String, StoreError> {
        let digest = hex::encode(Sha256::digest(bytes));
        let path = self.root.join(SCREENS_DIR).join(format!("{digest}.bin"));
        if !path.exists() {
            fs::write(&path, bytes).map_err(io_err(&path))?;
        }
        Ok(digest)
    }

    fn get_blob(&self, digest: &str) -> Result<Vec<u8>, StoreError> {
        let path = self.root.join(SCREENS_DIR).join(format!("{digest}.bin"));
        fs::read(&path).map_err(io_err(&path))
    }

    fn lines(&self) -> Result<Vec<(usize, String)>, StoreError> {
        let path = self.log_path();
        let file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(&path))?;
            if !line.trim().is_empty() {
                out.push((i + 1, line));
            }
        }
        Ok(out)
    }

    fn corrupt(&self, line: usize, e: serde_json::Error) -> StoreError {
        StoreError::CorruptRecord { path: self.log_path(), line, reason: e.to_string() }
    }

    fn scan(&self) -> Result<(Vec<String>, Counts), StoreError> {
        let mut ids = Vec::new();
        let mut counts = Counts::default();
        let mut goals = BTreeSet::new();
        for (n, line) in self.lines()? {
            let r: Record<Shallow> = serde_json::from_str(&line).map_err(|e| self.corrupt(n, e))?;
            counts.trajectories += 1;
            counts.screens += r.trajectory.steps.len();
            goals.insert(r.trajectory.instruction.id);
            ids.push(r.id);
        }
        counts.goals = goals.len();
        Ok((ids, counts))
    }

    /// Counts from a full rescan of the log.
    pub fn stats(&self) -> Result<Counts, StoreError> {
        Ok(self.scan()?.1)
    }

    pub fn ids(&self) -> Result<Vec<String>, StoreError> {
        Ok(self.scan()?.0)
    }

    fn hydrate(&self, mut traj: Trajectory) -> Result<Trajectory, StoreError> {
        for step in &mut traj.steps {
            if let PayloadRef::Blob(digest) = &step.screenshot.payload_ref {
                step.screenshot.payload_ref = PayloadRef::Inline(self.get_blob(digest)?);
            }
        }
        Ok(traj)
    }

    pub fn load_trajectory(&self, id: &str) -> Result<Trajectory, StoreError> {
        for (n, line) in self.lines()? {
            let r: Record<Trajectory> = serde_json::from_str(&line).map_err(|e| self.corrupt(n, e))?;
            if r.id == id {
                return self.hydrate(r.trajectory);
            }
        }
        Err(StoreError::NotFound(id.to_string()))
    }

    /// Every trajectory in log order, with its id.
    pub fn load_all(&self) -> Result<Vec<(String, Trajectory)>, StoreError> {
        self.lines()?
            .into_iter()
            .map(|(n, line)| {
                let r: Record<Trajectory> = serde_json::from_str(&line).map_err(|e| self.corrupt(n, e))?;
                Ok((r.id, self.hydrate(r.trajectory)?))
            })
            .collect()
    }

    /// Records a train/test split in the manifest.
    pub fn write_split(&self, split: Split) -> Result<(), StoreError> {
        let ids: BTreeSet<String> = self.ids()?.into_iter().collect();
        let mut seen = BTreeSet::new();
        for id in split.train_ids.iter().chain(&split.test_ids) {
            if !ids.contains(id) || !seen.insert(id.clone()) {
                return Err(StoreError::ValidationFailed(vec![format!("split id {id:?} unknown or repeated")]));
            }
        }
        if seen.len() != ids.len() {
            return Err(StoreError::ValidationFailed(vec!["split does not cover every trajectory".into()]));
        }
        let _guard = self.writer.lock().expect("dataset writer lock");
        let mut manifest = self.manifest()?;
        manifest.split = Some(split);
        self.write_manifest(&manifest)
    }

    /// Appends one JSON value to the episode log.
    pub fn append_episode<T: Serialize>(&self, episode: &T) -> Result<(), StoreError> {
        let _guard = self.writer.lock().expect("dataset writer lock");
        let path = self.root.join(EPISODES_FILE);
        let mut line = serde_json::to_string(episode).expect("serializes");
        line.push('\n');
        let mut file = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        file.write_all(line.as_bytes()).map_err(io_err(&path))
    }
}

/// Counts for the dataset at `root`; a missing dataset counts as empty.
pub fn dataset_stats(root: &Path) -> Result<Counts, StoreError> {
    if !root.join(TRAJECTORIES_FILE).exists() {
        return Ok(Counts::default());
    }
    Dataset { root: root.to_path_buf(), writer: Mutex::new(()) }.stats()
}

/// Reads an instruction pack: a JSON array of instructions.
pub fn load_instructions(path: &Path) -> Result<Vec<Instruction>, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| StoreError::Format { path: path.to_path_buf(), reason: e.to_string() })
}
