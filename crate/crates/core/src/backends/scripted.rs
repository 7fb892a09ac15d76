use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use async_trait::async_trait;

use super::{BackendError, ModelBackend, ModelRequest};

/// Splits a script into replies. A line consisting of `---` separates
/// replies; a trailing separator does not add an empty reply.
pub fn split_script(text: &str) -> Vec<String> {
    let mut replies = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim() == "---" {
            replies.push(current.join("\n").trim().to_string());
            current.clear();
        } else {
            current.push(line);
        }
    }
    let tail = current.join("\n").trim().to_string();
    if !tail.is_empty() {
        replies.push(tail);
    }
    replies
}

enum Source {
    Shared(VecDeque<String>),
    /// One queue per instruction id, loaded lazily from `<dir>/<id>.txt`
    /// when `dir` is set.
    PerInstruction {
        dir: Option<PathBuf>,
        queues: HashMap<String, VecDeque<String>>,
    },
}

/// Replays canned replies in order. Deterministic by construction.
pub struct ScriptedBackend {
    source: Mutex<Source>,
}

impl ScriptedBackend {
    pub fn from_replies(replies: impl IntoIterator<Item = String>) -> Self {
        Self { source: Mutex::new(Source::Shared(replies.into_iter().collect())) }
    }

    pub fn from_text(text: &str) -> Self {
        Self::from_replies(split_script(text))
    }

    /// Separate reply queues per instruction id.
    pub fn per_instruction(queues: HashMap<String, Vec<String>>) -> Self {
        let queues = queues.into_iter().map(|(k, v)| (k, v.into())).collect();
        Self { source: Mutex::new(Source::PerInstruction { dir: None, queues }) }
    }

    /// A file is one shared queue; a directory holds `<instruction_id>.txt`.
    pub fn from_path(path: &Path) -> Result<Self, BackendError> {
        if path.is_dir() {
            return Ok(Self {
                source: Mutex::new(Source::PerInstruction { dir: Some(path.to_path_buf()), queues: HashMap::new() }),
            });
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("script {}: {e}", path.display())))?;
        Ok(Self::from_text(&text))
    }

    pub fn remaining(&self) -> usize {
        match &*self.source.lock().unwrap() {
            Source::Shared(q) => q.len(),
            Source::PerInstruction { queues, .. } => queues.values().map(VecDeque::len).sum(),
        }
    }
}

#[async_trait]
impl ModelBackend for ScriptedBackend {
    async fn complete(&self, request: &ModelRequest) -> Result<String, BackendError> {
        let mut source = self.source.lock().unwrap();
        let exhausted = || BackendError::Unavailable(format!("script exhausted for {}", request.instruction_id));
        match &mut *source {
            Source::Shared(queue) => queue.pop_front().ok_or_else(exhausted),
            Source::PerInstruction { dir, queues } => {
                if !queues.contains_key(&request.instruction_id) {
                    let Some(dir) = dir else { return Err(exhausted()) };
                    let path = dir.join(format!("{}.txt", request.instruction_id));
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| BackendError::Unavailable(format!("no script {}: {e}", path.display())))?;
                    queues.insert(request.instruction_id.clone(), split_script(&text).into());
                }
                queues.get_mut(&request.instruction_id).and_then(VecDeque::pop_front).ok_or_else(exhausted)
            }
        }
    }
}
