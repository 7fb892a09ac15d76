//! `{{variable}}` prompt templates.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Variables a template may reference.
pub const VARIABLES: [&str; 7] =
    ["instruction", "plan", "plan_item", "history", "screenshot", "agent_action", "critic_action"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("missing variable {0:?}")]
    MissingVariable(String),
    #[error("unknown placeholder {0:?}")]
    UnknownPlaceholder(String),
    #[error("template {name}: {reason}")]
    Load { name: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TemplateName {
    Planning,
    ActionPhase,
    AgentAction,
    CriticAction,
    Scoring,
    Completion,
}

impl TemplateName {
    pub const ALL: [TemplateName; 6] = [
        TemplateName::Planning,
        TemplateName::ActionPhase,
        TemplateName::AgentAction,
        TemplateName::CriticAction,
        TemplateName::Scoring,
        TemplateName::Completion,
    ];

    /// File stem used when loading a template directory.
    pub fn file_stem(self) -> &'static str {
        match self {
            TemplateName::Planning => "planning",
            TemplateName::ActionPhase => "action_phase",
            TemplateName::AgentAction => "agent_action",
            TemplateName::CriticAction => "critic_action",
            TemplateName::Scoring => "scoring",
            TemplateName::Completion => "completion",
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_stem())
    }
}

enum Segment<'a> {
    Text(&'a str),
    Var(&'a str),
}

/// Splits a body into literal text and `{{name}}` references. An unclosed
/// `{{` is kept as literal text.
fn segments(body: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find("{{") {
        let Some(close) = rest[open + 2..].find("}}") else { break };
        if open > 0 {
            out.push(Segment::Text(&rest[..open]));
        }
        out.push(Segment::Var(rest[open + 2..open + 2 + close].trim()));
        rest = &rest[open + 2 + close + 2..];
    }
    if !rest.is_empty() {
        out.push(Segment::Text(rest));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    body: String,
}

impl PromptTemplate {
    /// Rejects bodies that reference anything outside [`VARIABLES`].
    pub fn new(name: TemplateName, body: impl Into<String>) -> Result<Self, TemplateError> {
        let body = body.into();
        for seg in segments(&body) {
            if let Segment::Var(var) = seg {
                if !VARIABLES.contains(&var) {
                    return Err(TemplateError::UnknownPlaceholder(var.to_string()));
                }
            }
        }
        Ok(Self { name, body })
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn placeholders(&self) -> Vec<&str> {
        segments(&self.body)
            .into_iter()
            .filter_map(|s| match s {
                Segment::Var(v) => Some(v),
                Segment::Text(_) => None,
            })
            .collect()
    }

    pub fn render(&self, bindings: &HashMap<&str, String>) -> Result<String, TemplateError> {
        render_body(&self.body, bindings)
    }
}

/// Replaces every `{{x}}` in `body` with `bindings[x]`. Substituted values
/// are never re-scanned.
pub fn render_body(body: &str, bindings: &HashMap<&str, String>) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(body.len());
    for seg in segments(body) {
        match seg {
            Segment::Text(t) => out.push_str(t),
            Segment::Var(var) => {
                if !VARIABLES.contains(&var) {
                    return Err(TemplateError::UnknownPlaceholder(var.to_string()));
                }
                let value = bindings.get(var).ok_or_else(|| TemplateError::MissingVariable(var.to_string()))?;
                out.push_str(value);
            }
        }
    }
    Ok(out)
}

pub fn render_prompt(tpl: &PromptTemplate, bindings: &HashMap<&str, String>) -> Result<String, TemplateError> {
    tpl.render(bindings)
}

/// One template per role.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: HashMap<TemplateName, PromptTemplate>,
}

impl TemplateSet {
    /// The default bodies shipped with the crate.
    pub fn builtin() -> Self {
        let body = |name| match name {
            TemplateName::Planning => include_str!("../../templates/planning.txt"),
            TemplateName::ActionPhase => include_str!("../../templates/action_phase.txt"),
            TemplateName::AgentAction => include_str!("../../templates/agent_action.txt"),
            TemplateName::CriticAction => include_str!("../../templates/critic_action.txt"),
            TemplateName::Scoring => include_str!("../../templates/scoring.txt"),
            TemplateName::Completion => include_str!("../../templates/completion.txt"),
        };
        let templates = TemplateName::ALL
            .into_iter()
            .map(|name| (name, PromptTemplate::new(name, body(name)).expect("builtin template")))
            .collect();
        Self { templates }
    }

    /// Loads `<stem>.txt` for each role from `dir`, falling back to the
    /// builtin body for files that do not exist.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        for name in TemplateName::ALL {
            let path = dir.join(format!("{}.txt", name.file_stem()));
            if !path.exists() {
                continue;
            }
            let body = std::fs::read_to_string(&path)
                .map_err(|e| TemplateError::Load { name: name.to_string(), reason: e.to_string() })?;
            set.templates.insert(name, PromptTemplate::new(name, body)?);
        }
        Ok(set)
    }

    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        &self.templates[&name]
    }

    pub fn set(&mut self, tpl: PromptTemplate) {
        self.templates.insert(tpl.name, tpl);
    }
}
