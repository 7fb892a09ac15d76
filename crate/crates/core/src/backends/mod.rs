//! Model backends for the probed agent, the critic, the confidence-emitting
//! policy and the oracle.
//!
//! A [`ModelBackend`] turns a rendered prompt into a reply string. [`Backend`]
//! wraps one with templates, retry policy and reply parsing, and exposes the
//! role-level calls (`agent_predict`, `critic_plan`, ...).

mod calllog;
mod remote;
mod scripted;
pub mod template;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, CodecError};
use crate::types::{Action, PlanSchedule, Screenshot};

pub use calllog::{CallLog, CallRecord, RecordingBackend};
pub use remote::RemoteHttpBackend;
pub use scripted::{split_script, ScriptedBackend};
pub use template::{render_prompt, PromptTemplate, TemplateError, TemplateName, TemplateSet};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("{0}")]
    Codec(#[from] CodecError),
    #[error("critic returned an empty plan")]
    EmptyPlan,
    #[error("malformed plan index: {0}")]
    MalformedIndex(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("backend config: {0}")]
    Config(String),
}

impl BackendError {
    /// Malformed replies are re-queried; transport and configuration errors
    /// are not a property of the reply.
    fn is_malformed_reply(&self) -> bool {
        matches!(self, BackendError::Codec(_) | BackendError::EmptyPlan | BackendError::MalformedIndex(_))
    }
}

/// A single model call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub role: TemplateName,
    pub instruction_id: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

#[async_trait]
pub trait ModelBackend: Send + Sync {
    async fn complete(&self, request: &ModelRequest) -> Result<String, BackendError>;
}

/// Optional hook that turns a screenshot into an element-text listing,
/// appended to the `screenshot` binding (e.g. an OCR layout parser).
pub trait LayoutParser: Send + Sync {
    fn describe(&self, screenshot: &Screenshot) -> Option<String>;
}

/// Lists inline payloads as UTF-8 text. Useful with simulated screens whose
/// payload is a textual description.
pub struct InlineTextLayout;

impl LayoutParser for InlineTextLayout {
    fn describe(&self, screenshot: &Screenshot) -> Option<String> {
        match &screenshot.payload_ref {
            crate::types::PayloadRef::Inline(bytes) => String::from_utf8(bytes.clone()).ok(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BackendKind {
    RemoteHttp,
    Scripted,
}

fn default_timeout() -> u64 {
    60
}

fn default_retries() -> u32 {
    2
}

fn default_backoff() -> u64 {
    500
}

/// Backend configuration as it appears in config files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_token_env: Option<String>,
    /// Per-request timeout in seconds.
    #[serde(default = "default_timeout")]
    pub timeout: u64,
    /// Extra attempts after the first; the default of 2 gives 3 attempts.
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// Base delay before retrying a transport failure; doubles each attempt.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    /// A `---`-delimited reply file, or a directory of `<instruction_id>.txt`
    /// files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script_path: Option<PathBuf>,
    /// Require replies to be exactly one action / integer instead of
    /// extracting the first parsable line.
    #[serde(default)]
    pub strict: bool,
    /// Append every call to this JSONL audit log.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_path: Option<PathBuf>,
    /// Directory of template overrides.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
    /// Append an element-text listing of inline screenshots to prompts.
    #[serde(default)]
    pub layout_text: bool,
}

impl BackendConfig {
    pub fn scripted(path: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::Scripted,
            endpoint: None,
            model: None,
            auth_token_env: None,
            timeout: default_timeout(),
            retries: default_retries(),
            backoff_ms: default_backoff(),
            script_path: Some(path.into()),
            strict: false,
            log_path: None,
            templates: None,
            layout_text: false,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match self.kind {
            BackendKind::RemoteHttp if self.endpoint.is_none() => {
                Err(BackendError::Config("REMOTE_HTTP requires endpoint".into()))
            }
            BackendKind::Scripted if self.script_path.is_none() => {
                Err(BackendError::Config("SCRIPTED requires script_path".into()))
            }
            _ => Ok(()),
        }
    }

    /// Resolves relative paths against `base`.
    pub fn resolve_paths(mut self, base: &Path) -> Self {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.script_path);
        fix(&mut self.log_path);
        fix(&mut self.templates);
        self
    }
}

/// A model plus everything needed to talk to it in a given role.
#[derive(Clone)]
pub struct Backend {
    model: Arc<dyn ModelBackend>,
    templates: Arc<TemplateSet>,
    retries: u32,
    backoff: Duration,
    strict: bool,
    layout: Option<Arc<dyn LayoutParser>>,
}

impl std::fmt::Debug for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backend").field("retries", &self.retries).field("strict", &self.strict).finish_non_exhaustive()
    }
}

impl Backend {
    pub fn new(model: Arc<dyn ModelBackend>) -> Self {
        Self {
            model,
            templates: Arc::new(TemplateSet::builtin()),
            retries: default_retries(),
            backoff: Duration::from_millis(default_backoff()),
            strict: false,
            layout: None,
        }
    }

    pub fn scripted(backend: ScriptedBackend) -> Self {
        Self::new(Arc::new(backend))
    }

    pub fn from_config(cfg: &BackendConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        let mut model: Arc<dyn ModelBackend> = match cfg.kind {
            BackendKind::Scripted => {
                let path = cfg.script_path.as_ref().expect("validated");
                Arc::new(ScriptedBackend::from_path(path)?)
            }
            BackendKind::RemoteHttp => Arc::new(RemoteHttpBackend::from_config(cfg)?),
        };
        if let Some(log) = &cfg.log_path {
            let log = CallLog::open(log).map_err(|e| BackendError::Config(e.to_string()))?;
            model = Arc::new(RecordingBackend::new(model, Arc::new(log)));
        }
        let mut backend = Self::new(model)
            .with_retries(cfg.retries)
            .with_backoff(Duration::from_millis(cfg.backoff_ms))
            .with_strict(cfg.strict);
        if let Some(dir) = &cfg.templates {
            backend = backend.with_templates(TemplateSet::load_dir(dir)?);
        }
        if cfg.layout_text {
            backend = backend.with_layout(Arc::new(InlineTextLayout));
        }
        Ok(backend)
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn with_strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn with_templates(mut self, templates: TemplateSet) -> Self {
        self.templates = Arc::new(templates);
        self
    }

    pub fn with_layout(mut self, layout: Arc<dyn LayoutParser>) -> Self {
        self.layout = Some(layout);
        self
    }

    fn screenshot_binding(&self, shot: &Screenshot) -> String {
        let mut text = format!("[screenshot {} {}x{}]", shot.id, shot.dims.width(), shot.dims.height());
        if let Some(listing) = self.layout.as_ref().and_then(|l| l.describe(shot)) {
            text.push('\n');
            text.push_str(&listing);
        }
        text
    }

    /// Renders, sends and parses, re-querying on malformed replies and
    /// backing off on transport failures. `retries + 1` attempts in total.
    async fn call<T>(
        &self,
        role: TemplateName,
        instruction_id: &str,
        bindings: HashMap<&str, String>,
        image: Option<&Screenshot>,
        parse: impl Fn(&str) -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let prompt = self.templates.get(role).render(&bindings)?;
        let request = ModelRequest {
            role,
            instruction_id: instruction_id.to_string(),
            prompt,
            image_ref: image.map(|s| s.payload_ref.image_ref()),
        };
        let mut last = None;
        for attempt in 0..=self.retries {
            match self.model.complete(&request).await {
                Ok(reply) => match parse(&reply) {
                    Ok(value) => return Ok(value),
                    Err(e) if e.is_malformed_reply() => {
                        tracing::debug!(%role, attempt, error = %e, "malformed reply");
                        last = Some(e);
                    }
                    Err(e) => return Err(e),
                },
                Err(e @ BackendError::Unavailable(_)) => {
                    tracing::warn!(%role, attempt, error = %e, "backend call failed");
                    last = Some(e);
                    if attempt < self.retries && !self.backoff.is_zero() {
                        tokio::time::sleep(self.backoff * 2u32.saturating_pow(attempt)).await;
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn parse_action_reply(&self, reply: &str) -> Result<Action, BackendError> {
        if self.strict {
            return Ok(codec::parse_action(reply)?);
        }
        extract_action(reply).map_err(BackendError::from)
    }

    /// The probed agent's next action.
    pub async fn agent_predict(
        &self,
        instruction: &crate::types::Instruction,
        screenshot: &Screenshot,
        history: &[Action],
    ) -> Result<Action, BackendError> {
        let bindings = HashMap::from([
            ("instruction", instruction.text.clone()),
            ("history", render_history(history)),
            ("screenshot", self.screenshot_binding(screenshot)),
        ]);
        self.call(TemplateName::AgentAction, &instruction.id, bindings, Some(screenshot), |r| {
            self.parse_action_reply(r)
        })
        .await
    }

    /// A confidence-integrated policy's next action and its 1..5 score.
    pub async fn policy_predict(
        &self,
        instruction: &crate::types::Instruction,
        screenshot: &Screenshot,
        history: &[Action],
    ) -> Result<(Action, u8), BackendError> {
        let bindings = HashMap::from([
            ("instruction", instruction.text.clone()),
            ("history", render_history(history)),
            ("screenshot", self.screenshot_binding(screenshot)),
        ]);
        self.call(TemplateName::AgentAction, &instruction.id, bindings, Some(screenshot), |r| {
            Ok(codec::parse_scored_output(r)?)
        })
        .await
    }

    pub async fn critic_plan(&self, instruction: &crate::types::Instruction) -> Result<PlanSchedule, BackendError> {
        let bindings = HashMap::from([("instruction", instruction.text.clone())]);
        self.call(TemplateName::Planning, &instruction.id, bindings, None, |r| {
            let items = parse_plan(r);
            if items.is_empty() {
                Err(BackendError::EmptyPlan)
            } else {
                Ok(PlanSchedule::new(items))
            }
        })
        .await
    }

    /// The critic's supervisory action for the current plan item.
    pub async fn critic_supervise(
        &self,
        instruction: &crate::types::Instruction,
        plan_item: &str,
        screenshot: &Screenshot,
        history: &[Action],
    ) -> Result<Action, BackendError> {
        let bindings = HashMap::from([
            ("instruction", instruction.text.clone()),
            ("plan_item", plan_item.to_string()),
            ("history", render_history(history)),
            ("screenshot", self.screenshot_binding(screenshot)),
        ]);
        self.call(TemplateName::CriticAction, &instruction.id, bindings, Some(screenshot), |r| {
            self.parse_action_reply(r)
        })
        .await
    }

    /// The critic's 1..5 confidence in the agent's action.
    #[allow(clippy::too_many_arguments)]
    pub async fn critic_score(
        &self,
        instruction: &crate::types::Instruction,
        plan_item: &str,
        screenshot: &Screenshot,
        agent_action: &Action,
        critic_action: &Action,
        history: &[Action],
    ) -> Result<u8, BackendError> {
        let bindings = HashMap::from([
            ("instruction", instruction.text.clone()),
            ("plan_item", plan_item.to_string()),
            ("history", render_history(history)),
            ("screenshot", self.screenshot_binding(screenshot)),
            ("agent_action", agent_action.to_string()),
            ("critic_action", critic_action.to_string()),
        ]);
        let strict = self.strict;
        self.call(TemplateName::Scoring, &instruction.id, bindings, Some(screenshot), move |r| {
            let raw = if strict {
                r.trim().to_string()
            } else {
                first_integer(r).ok_or_else(|| CodecError::MalformedScore(format!("no integer in {r:?}")))?
            };
            Ok(codec::parse_score(&raw)?)
        })
        .await
    }

    /// Locates the plan item the screen is at: an index in `0..=plan.len()`.
    pub async fn critic_phase(
        &self,
        instruction: &crate::types::Instruction,
        plan: &PlanSchedule,
        screenshot: &Screenshot,
    ) -> Result<usize, BackendError> {
        let bindings = HashMap::from([
            ("instruction", instruction.text.clone()),
            ("plan", plan.render()),
            ("screenshot", self.screenshot_binding(screenshot)),
        ]);
        let len = plan.len();
        let strict = self.strict;
        self.call(TemplateName::ActionPhase, &instruction.id, bindings, Some(screenshot), move |r| {
            let raw = if strict { Some(r.trim().to_string()) } else { first_integer(r) };
            let raw = raw.ok_or_else(|| BackendError::MalformedIndex(format!("no integer in {r:?}")))?;
            let index: i64 =
                raw.parse().map_err(|_| BackendError::MalformedIndex(format!("not an integer: {raw:?}")))?;
            if index < 0 || index as usize > len {
                return Err(BackendError::MalformedIndex(format!("{index} outside 0..={len}")));
            }
            Ok(index as usize)
        })
        .await
    }

    /// Whether the critic judges the instruction finished.
    pub async fn critic_done(
        &self,
        instruction: &crate::types::Instruction,
        plan: &PlanSchedule,
        screenshot: &Screenshot,
    ) -> Result<bool, BackendError> {
        let bindings = HashMap::from([
            ("instruction", instruction.text.clone()),
            ("plan", plan.render()),
            ("screenshot", self.screenshot_binding(screenshot)),
        ]);
        self.call(TemplateName::Completion, &instruction.id, bindings, Some(screenshot), |r| Ok(is_affirmative(r)))
            .await
    }
}

pub fn render_history(history: &[Action]) -> String {
    if history.is_empty() {
        return "(none)".into();
    }
    history.iter().enumerate().map(|(i, a)| format!("{i}: {a}")).collect::<Vec<_>>().join("\n")
}

/// First line of `reply` that parses as an action, also accepting an
/// `ACTION:` label.
pub fn extract_action(reply: &str) -> Result<Action, CodecError> {
    if let Ok(action) = codec::parse_action(reply) {
        return Ok(action);
    }
    let mut first_err = None;
    for line in reply.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let line = line.get(..7).filter(|head| head.eq_ignore_ascii_case("ACTION:")).map_or(line, |_| &line[7..]);
        match codec::parse_action(line) {
            Ok(action) => return Ok(action),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    Err(first_err.unwrap_or_else(|| CodecError::MalformedAction("empty reply".into())))
}

/// The first run of ASCII digits (with an optional leading minus).
pub fn first_integer(text: &str) -> Option<String> {
    let bytes = text.as_bytes();
    let start = bytes.iter().position(u8::is_ascii_digit)?;
    let end = bytes[start..].iter().position(|b| !b.is_ascii_digit()).map_or(bytes.len(), |n| start + n);
    let negative = start > 0 && bytes[start - 1] == b'-';
    let digits = &text[start..end];
    Some(if negative { format!("-{digits}") } else { digits.to_string() })
}

/// Plan items from a numbered-list reply. If any line is numbered only the
/// numbered lines count; otherwise every non-blank line is an item.
pub fn parse_plan(reply: &str) -> Vec<String> {
    let lines: Vec<&str> = reply.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let numbered: Vec<String> = lines.iter().filter_map(|l| strip_number(l)).collect();
    if numbered.is_empty() {
        lines.into_iter().map(String::from).collect()
    } else {
        numbered
    }
}

fn strip_number(line: &str) -> Option<String> {
    let digits = line.find(|c: char| !c.is_ascii_digit())?;
    if digits == 0 {
        return None;
    }
    let rest = line[digits..].strip_prefix(['.', ')', ':'])?;
    let item = rest.trim();
    (!item.is_empty()).then(|| item.to_string())
}

/// Affirmative iff the first word, case-folded, is yes / finished / complete.
pub fn is_affirmative(reply: &str) -> bool {
    let word: String =
        reply.trim_start().chars().take_while(|c| c.is_alphabetic()).flat_map(char::to_lowercase).collect();
    matches!(word.as_str(), "yes" | "finished" | "complete")
}
