use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{BackendError, ModelBackend, ModelRequest, ScriptedBackend};

/// One audited model call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub seq: u64,
    pub request: ModelRequest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Append-only JSONL log of model calls.
pub struct CallLog {
    path: PathBuf,
    inner: Mutex<(File, u64)>,
}

impl CallLog {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let existing = if path.exists() { Self::read(path)?.len() as u64 } else { 0 };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { path: path.to_path_buf(), inner: Mutex::new((file, existing)) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, request: &ModelRequest, result: &Result<String, BackendError>) -> std::io::Result<()> {
        let mut guard = self.inner.lock().unwrap();
        let (file, seq) = &mut *guard;
        let record = CallRecord {
            seq: *seq,
            request: request.clone(),
            reply: result.as_ref().ok().cloned(),
            error: result.as_ref().err().map(ToString::to_string),
        };
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        file.write_all(line.as_bytes())?;
        file.flush()?;
        *seq += 1;
        Ok(())
    }

    pub fn read(path: &Path) -> std::io::Result<Vec<CallRecord>> {
        let reader = BufReader::new(File::open(path)?);
        let mut out = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
        }
        Ok(out)
    }

    /// Successful replies as a `---`-delimited script, in call order.
    pub fn to_script(records: &[CallRecord]) -> String {
        records.iter().filter_map(|r| r.reply.as_deref()).collect::<Vec<_>>().join("\n---\n")
    }

    /// A scripted backend that answers each instruction with the replies
    /// it got when the log was recorded.
    pub fn replay(records: &[CallRecord]) -> ScriptedBackend {
        let mut queues: std::collections::HashMap<String, Vec<String>> = Default::default();
        for r in records {
            if let Some(reply) = &r.reply {
                queues.entry(r.request.instruction_id.clone()).or_default().push(reply.clone());
            }
        }
        ScriptedBackend::per_instruction(queues)
    }
}

/// Logs every call made through the wrapped backend.
pub struct RecordingBackend {
    inner: Arc<dyn ModelBackend>,
    log: Arc<CallLog>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn ModelBackend>, log: Arc<CallLog>) -> Self {
        Self { inner, log }
    }
}

#[async_trait]
impl ModelBackend for RecordingBackend {
    async fn complete(&self, request: &ModelRequest) -> Result<String, BackendError> {
        let result = self.inner.complete(request).await;
        if let Err(e) = self.log.append(request, &result) {
            tracing::warn!(path = %self.log.path().display(), error = %e, "failed to append call log");
        }
        result
    }
}
