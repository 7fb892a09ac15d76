//! Domain types shared by every stage of the pipeline.
//!
//! Everything here is a plain value: cheap to clone and `Send + Sync`.
//! Serialized field names follow the type definitions verbatim, since the
//! dataset format is a public schema.

use std::collections::BTreeSet;
use std::fmt;

use base64::Engine as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// The seven kinds of device action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionKind {
    Click,
    Scroll,
    Type,
    PressBack,
    PressHome,
    Complete,
    Impossible,
}

impl ActionKind {
    pub const ALL: [ActionKind; 7] = [
        ActionKind::Click,
        ActionKind::Scroll,
        ActionKind::Type,
        ActionKind::PressBack,
        ActionKind::PressHome,
        ActionKind::Complete,
        ActionKind::Impossible,
    ];

    /// Verb used by the textual grammar.
    pub fn verb(self) -> &'static str {
        match self {
            ActionKind::Click => "CLICK",
            ActionKind::Scroll => "SCROLL",
            ActionKind::Type => "TYPE",
            ActionKind::PressBack => "PRESS_BACK",
            ActionKind::PressHome => "PRESS_HOME",
            ActionKind::Complete => "COMPLETE",
            ActionKind::Impossible => "IMPOSSIBLE",
        }
    }

    pub fn from_verb(verb: &str) -> Option<Self> {
        let verb = verb.to_ascii_uppercase();
        ActionKind::ALL.into_iter().find(|k| k.verb() == verb)
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.verb())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScrollDir {
    Up,
    Down,
    Left,
    Right,
}

impl ScrollDir {
    pub const ALL: [ScrollDir; 4] = [ScrollDir::Up, ScrollDir::Down, ScrollDir::Left, ScrollDir::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            ScrollDir::Up => "UP",
            ScrollDir::Down => "DOWN",
            ScrollDir::Left => "LEFT",
            ScrollDir::Right => "RIGHT",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.to_ascii_uppercase();
        ScrollDir::ALL.into_iter().find(|d| d.as_str() == s)
    }
}

/// A point in device pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point {
    pub x: u32,
    pub y: u32,
}

impl Point {
    pub fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }
}

/// A device action. Arguments live inside the variant, so "argument present
/// iff kind needs it" holds by construction.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Action {
    Click(Point),
    Scroll(ScrollDir),
    /// Text to enter. Must not contain line breaks.
    Type(String),
    PressBack,
    PressHome,
    Complete,
    Impossible,
}

impl Action {
    pub fn click(x: u32, y: u32) -> Self {
        Action::Click(Point::new(x, y))
    }

    pub fn typed(text: impl Into<String>) -> Self {
        Action::Type(text.into())
    }

    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Click(_) => ActionKind::Click,
            Action::Scroll(_) => ActionKind::Scroll,
            Action::Type(_) => ActionKind::Type,
            Action::PressBack => ActionKind::PressBack,
            Action::PressHome => ActionKind::PressHome,
            Action::Complete => ActionKind::Complete,
            Action::Impossible => ActionKind::Impossible,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, Action::Complete | Action::Impossible)
    }

    /// Checks the invariants the enum cannot express.
    pub fn validate(&self) -> Result<(), String> {
        match self {
            Action::Type(text) if text.is_empty() => Err("TYPE text is empty".into()),
            Action::Type(text) if text.contains(['\n', '\r']) => Err("TYPE text contains a line break".into()),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Click(p) => write!(f, "CLICK <{}, {}>", p.x, p.y),
            Action::Scroll(d) => write!(f, "SCROLL [{}]", d.as_str()),
            Action::Type(text) => write!(f, "TYPE [{text}]"),
            other => f.write_str(other.kind().verb()),
        }
    }
}

/// Flat wire form of [`Action`]: `{kind, click_point, scroll_dir, text}`.
#[derive(Serialize, Deserialize)]
struct ActionRecord {
    kind: ActionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    click_point: Option<(u32, u32)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scroll_dir: Option<ScrollDir>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

impl Serialize for Action {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut record = ActionRecord { kind: self.kind(), click_point: None, scroll_dir: None, text: None };
        match self {
            Action::Click(p) => record.click_point = Some((p.x, p.y)),
            Action::Scroll(d) => record.scroll_dir = Some(*d),
            Action::Type(t) => record.text = Some(t.clone()),
            _ => {}
        }
        record.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let r = ActionRecord::deserialize(deserializer)?;
        let action = match (r.kind, r.click_point, r.scroll_dir, r.text) {
            (ActionKind::Click, Some((x, y)), None, None) => Action::click(x, y),
            (ActionKind::Scroll, None, Some(d), None) => Action::Scroll(d),
            (ActionKind::Type, None, None, Some(t)) => Action::Type(t),
            (ActionKind::PressBack, None, None, None) => Action::PressBack,
            (ActionKind::PressHome, None, None, None) => Action::PressHome,
            (ActionKind::Complete, None, None, None) => Action::Complete,
            (ActionKind::Impossible, None, None, None) => Action::Impossible,
            (kind, ..) => return Err(D::Error::custom(format!("arguments do not match action kind {kind}"))),
        };
        action.validate().map_err(D::Error::custom)?;
        Ok(action)
    }
}

/// Screen size in device pixels. Both sides are strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawDims")]
pub struct ScreenDims {
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct RawDims {
    width: u32,
    height: u32,
}

impl TryFrom<RawDims> for ScreenDims {
    type Error = String;

    fn try_from(raw: RawDims) -> Result<Self, String> {
        ScreenDims::new(raw.width, raw.height)
    }
}

impl ScreenDims {
    pub fn new(width: u32, height: u32) -> Result<Self, String> {
        if width == 0 || height == 0 {
            return Err(format!("screen dimensions must be positive, got {width}x{height}"));
        }
        Ok(Self { width, height })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }
}

/// Where a screenshot's image bytes live.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadRef {
    /// Path to an image file, outside any dataset.
    File(String),
    /// Bytes carried inline, base64 on the wire.
    Inline(#[serde(with = "b64")] Vec<u8>),
    /// SHA-256 (hex) of a blob stored inside a dataset's `screens/` folder.
    Blob(String),
}

mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text).map_err(serde::de::Error::custom)
    }
}

impl PayloadRef {
    pub fn inline_text(text: &str) -> Self {
        PayloadRef::Inline(text.as_bytes().to_vec())
    }

    /// Short reference handed to remote models alongside a prompt.
    pub fn image_ref(&self) -> String {
        match self {
            PayloadRef::File(path) => path.clone(),
            PayloadRef::Inline(bytes) => {
                format!("data:;base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes))
            }
            PayloadRef::Blob(hash) => format!("blob:{hash}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Screenshot {
    pub id: String,
    pub dims: ScreenDims,
    pub payload_ref: PayloadRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Language {
    En,
    Zh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Scenario {
    Ambiguous,
    Interruption,
    Hijack,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub id: String,
    pub text: String,
    pub language: Language,
    pub app: String,
    pub topic: String,
    pub scenario: Scenario,
}

/// Allowed `app` and `topic` tags. An empty list accepts any tag.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    #[serde(default)]
    pub apps: Vec<String>,
    #[serde(default)]
    pub topics: Vec<String>,
}

impl Instruction {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("instruction id is empty".into());
        }
        if self.text.trim().is_empty() {
            return Err(format!("instruction {} has empty text", self.id));
        }
        if !vocab.apps.is_empty() && !vocab.apps.contains(&self.app) {
            return Err(format!("instruction {}: unknown app tag {:?}", self.id, self.app));
        }
        if !vocab.topics.is_empty() && !vocab.topics.contains(&self.topic) {
            return Err(format!("instruction {}: unknown topic tag {:?}", self.id, self.topic));
        }
        Ok(())
    }
}

/// The critic's ordered plan for an instruction and the item currently
/// being worked on. `cursor == items.len()` means "past the end".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanSchedule {
    pub items: Vec<String>,
    pub cursor: usize,
}

impl PlanSchedule {
    pub fn new(items: Vec<String>) -> Self {
        Self { items, cursor: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Index of the item the next step works on; clamps "past the end" to
    /// the last item.
    pub fn current_index(&self) -> usize {
        self.cursor.min(self.items.len().saturating_sub(1))
    }

    pub fn current(&self) -> Option<&str> {
        self.items.get(self.current_index()).map(String::as_str)
    }

    /// Numbered rendering used in prompts.
    pub fn render(&self) -> String {
        self.items.iter().enumerate().map(|(i, item)| format!("{}. {item}", i + 1)).collect::<Vec<_>>().join("\n")
    }
}

/// One probed step: the agent's proposal, the critic's correction and
/// score, and what was actually executed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedStep {
    pub index: usize,
    pub screenshot: Screenshot,
    pub agent_action: Action,
    /// Why the agent produced no usable action; `agent_action` then holds
    /// `IMPOSSIBLE` and the score is 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic_action: Option<Action>,
    pub score: u8,
    pub executed_action: Action,
    pub plan_item: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supplementary: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepViolation {
    ScoreOutOfRange(u8),
    CriticActionRequired,
    ExecutedScoreMismatch,
    InvalidAction(String),
}

impl fmt::Display for StepViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepViolation::ScoreOutOfRange(s) => write!(f, "score {s} outside 1..5"),
            StepViolation::CriticActionRequired => f.write_str("critic action required"),
            StepViolation::ExecutedScoreMismatch => f.write_str("executed/score mismatch"),
            StepViolation::InvalidAction(why) => write!(f, "invalid action: {why}"),
        }
    }
}

/// Returns every invariant `step` violates; empty iff well-formed.
///
/// A score of 5 means the agent's action runs; any lower score means the
/// critic's action runs.
pub fn validate_step(step: &AnnotatedStep) -> Vec<StepViolation> {
    let mut out = Vec::new();
    if !(1..=5).contains(&step.score) {
        out.push(StepViolation::ScoreOutOfRange(step.score));
    }
    let actions = [Some(&step.agent_action), step.critic_action.as_ref(), Some(&step.executed_action)];
    for action in actions.into_iter().flatten() {
        if let Err(why) = action.validate() {
            out.push(StepViolation::InvalidAction(why));
        }
    }
    if step.score == 5 {
        if step.executed_action != step.agent_action {
            out.push(StepViolation::ExecutedScoreMismatch);
        }
    } else {
        match &step.critic_action {
            None => out.push(StepViolation::CriticActionRequired),
            Some(critic) if *critic != step.executed_action => out.push(StepViolation::ExecutedScoreMismatch),
            Some(_) => {}
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub instruction: Instruction,
    pub steps: Vec<AnnotatedStep>,
    pub finished: bool,
    pub plan: PlanSchedule,
}

impl Trajectory {
    /// Executed actions before step `t`, i.e. the history the agent saw.
    pub fn history(&self, t: usize) -> Vec<Action> {
        self.steps[..t.min(self.steps.len())].iter().map(|s| s.executed_action.clone()).collect()
    }

    /// Structural problems: index gaps, duplicate screenshot ids, plan items
    /// out of range.
    pub fn structural_problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for (pos, step) in self.steps.iter().enumerate() {
            if step.index != pos {
                out.push(format!("step at position {pos} has index {}", step.index));
            }
            if !seen.insert(step.screenshot.id.as_str()) {
                out.push(format!("duplicate screenshot id {}", step.screenshot.id));
            }
        }
        if !self.steps.is_empty() && self.plan.is_empty() {
            out.push("trajectory has steps but an empty plan".into());
        }
        if self.plan.cursor > self.plan.len() {
            out.push(format!("plan cursor {} beyond {} items", self.plan.cursor, self.plan.len()));
        }
        for step in &self.steps {
            if !self.plan.is_empty() && step.plan_item >= self.plan.len() {
                out.push(format!("step {} refers to plan item {} of {}", step.index, step.plan_item, self.plan.len()));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shot(id: &str) -> Screenshot {
        Screenshot {
            id: id.into(),
            dims: ScreenDims::new(1080, 2400).unwrap(),
            payload_ref: PayloadRef::inline_text(id),
        }
    }

    fn step(score: u8, agent: Action, critic: Option<Action>, executed: Action) -> AnnotatedStep {
        AnnotatedStep {
            index: 0,
            screenshot: shot("s0"),
            agent_action: agent,
            agent_error: None,
            critic_action: critic,
            score,
            executed_action: executed,
            plan_item: 0,
            supplementary: None,
        }
    }

    #[test]
    fn score_five_executing_agent_is_ok() {
        let a = Action::click(616, 371);
        assert!(validate_step(&step(5, a.clone(), Some(a.clone()), a)).is_empty());
    }

    #[test]
    fn low_score_without_critic_is_flagged() {
        let a = Action::Scroll(ScrollDir::Up);
        let v = validate_step(&step(3, a.clone(), None, a));
        assert_eq!(v, vec![StepViolation::CriticActionRequired]);
        assert_eq!(v[0].to_string(), "critic action required");
    }

    #[test]
    fn score_five_executing_critic_is_flagged() {
        let agent = Action::Scroll(ScrollDir::Up);
        let critic = Action::click(146, 357);
        let v = validate_step(&step(5, agent, Some(critic.clone()), critic));
        assert_eq!(v, vec![StepViolation::ExecutedScoreMismatch]);
        assert_eq!(v[0].to_string(), "executed/score mismatch");
    }

    #[test]
    fn out_of_range_score_is_flagged() {
        let a = Action::Complete;
        let v = validate_step(&step(0, a.clone(), Some(a.clone()), a));
        assert!(v.contains(&StepViolation::ScoreOutOfRange(0)));
    }

    #[test]
    fn dims_reject_zero() {
        assert!(ScreenDims::new(0, 10).is_err());
        assert!(serde_json::from_str::<ScreenDims>(r#"{"width":10,"height":0}"#).is_err());
    }

    #[test]
    fn action_json_uses_flat_fields() {
        let json = serde_json::to_string(&Action::click(1, 2)).unwrap();
        assert_eq!(json, r#"{"kind":"CLICK","click_point":[1,2]}"#);
        let bad = r#"{"kind":"SCROLL","click_point":[1,2]}"#;
        assert!(serde_json::from_str::<Action>(bad).is_err());
        let typed: Action = serde_json::from_str(r#"{"kind":"TYPE","text":"milk"}"#).unwrap();
        assert_eq!(typed, Action::typed("milk"));
    }

    #[test]
    fn instruction_tags_checked_against_vocabulary() {
        let instr = Instruction {
            id: "i1".into(),
            text: "open Amazon".into(),
            language: Language::En,
            app: "Amazon".into(),
            topic: "Shopping".into(),
            scenario: Scenario::Normal,
        };
        assert!(instr.validate(&Vocabulary::default()).is_ok());
        let vocab = Vocabulary { apps: vec!["Taobao".into()], topics: vec![] };
        assert!(instr.validate(&vocab).is_err());
    }
}
