//! Textual action grammar and step matching.
//!
//! Surface forms: `CLICK <x, y>`, `SCROLL [DIR]`, `TYPE [text]`, and bare
//! verbs for the argument-free kinds. Scored model output is two lines,
//! `ACTION: <action>` and `SCORE: <1..5>`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Action, ActionKind, ScreenDims, ScrollDir};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("malformed action: {0}")]
    MalformedAction(String),
    #[error("malformed score: {0}")]
    MalformedScore(String),
}

fn malformed(reason: impl Into<String>) -> CodecError {
    CodecError::MalformedAction(reason.into())
}

/// Parses one action line. Surrounding whitespace and the verb's case are
/// ignored; arguments are strict.
pub fn parse_action(text: &str) -> Result<Action, CodecError> {
    let text = text.trim();
    let verb_len = text.find(|c: char| !(c.is_ascii_alphabetic() || c == '_')).unwrap_or(text.len());
    let (verb, rest) = text.split_at(verb_len);
    if verb.is_empty() {
        return Err(malformed(format!("no verb in {text:?}")));
    }
    let kind = ActionKind::from_verb(verb).ok_or_else(|| malformed(format!("unknown verb {verb:?}")))?;
    let rest = rest.trim();

    let action = match kind {
        ActionKind::Click => {
            let inner = bracketed(rest, '<', '>')?;
            let mut parts = inner.split(',');
            let (Some(x), Some(y), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(malformed(format!("CLICK needs exactly two coordinates, got <{inner}>")));
            };
            let coord = |s: &str| {
                s.trim().parse::<u32>().map_err(|_| malformed(format!("non-integer coordinate {:?}", s.trim())))
            };
            Action::click(coord(x)?, coord(y)?)
        }
        ActionKind::Scroll => {
            let inner = bracketed(rest, '[', ']')?;
            let dir = ScrollDir::parse(inner.trim())
                .ok_or_else(|| malformed(format!("unknown scroll direction {inner:?}")))?;
            Action::Scroll(dir)
        }
        ActionKind::Type => {
            let inner = bracketed(rest, '[', ']')?;
            let action = Action::typed(inner);
            action.validate().map_err(malformed)?;
            action
        }
        _ => {
            if !rest.is_empty() {
                return Err(malformed(format!("{verb} takes no arguments, got {rest:?}")));
            }
            match kind {
                ActionKind::PressBack => Action::PressBack,
                ActionKind::PressHome => Action::PressHome,
                ActionKind::Complete => Action::Complete,
                _ => Action::Impossible,
            }
        }
    };
    Ok(action)
}

/// The text between `open` at the start of `s` and `close` at its end.
fn bracketed(s: &str, open: char, close: char) -> Result<&str, CodecError> {
    s.strip_prefix(open).and_then(|s| s.strip_suffix(close)).ok_or_else(|| {
        if s.is_empty() {
            malformed("missing argument")
        } else {
            malformed(format!("expected {open}...{close}, got {s:?}"))
        }
    })
}

/// Canonical text for `action`; the inverse of [`parse_action`].
pub fn serialize_action(action: &Action) -> String {
    action.to_string()
}

/// Splits scored model output into its action and 1..5 confidence.
pub fn parse_scored_output(text: &str) -> Result<(Action, u8), CodecError> {
    let mut action = None;
    let mut score = None;
    for line in text.lines() {
        let line = line.trim();
        if let Some(rest) = strip_label(line, "ACTION:") {
            action.get_or_insert(rest);
        } else if let Some(rest) = strip_label(line, "SCORE:") {
            score.get_or_insert(rest);
        }
    }
    let action = parse_action(action.ok_or_else(|| malformed("missing ACTION: line"))?)?;
    let raw = score.ok_or_else(|| CodecError::MalformedScore("missing SCORE: line".into()))?;
    Ok((action, parse_score(raw)?))
}

/// A strict 1..5 integer.
pub fn parse_score(raw: &str) -> Result<u8, CodecError> {
    let raw = raw.trim();
    let value: i64 = raw.parse().map_err(|_| CodecError::MalformedScore(format!("not an integer: {raw:?}")))?;
    if !(1..=5).contains(&value) {
        return Err(CodecError::MalformedScore(format!("{value} outside 1..5")));
    }
    Ok(value as u8)
}

fn strip_label<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    let head = line.get(..label.len())?;
    head.eq_ignore_ascii_case(label).then(|| &line[label.len()..])
}

/// Formats an `(action, score)` pair in the scored wire format.
pub fn serialize_scored(action: &Action, score: u8) -> String {
    format!("ACTION: {action}\nSCORE: {score}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepMatch {
    pub type_match: bool,
    pub full_match: bool,
}

/// Trim + case-fold, the normalization applied to typed text.
pub fn normalize_text(text: &str) -> String {
    text.trim().to_lowercase()
}

/// Whether two click points lie within 14% of the screen width of each other.
///
/// Evaluated in integers: `d <= 0.14 w` iff `2500 d^2 <= 49 w^2`, so the
/// boundary is exact.
pub fn click_within_radius(a: (u32, u32), b: (u32, u32), width: u32) -> bool {
    let dx = a.0.abs_diff(b.0) as u128;
    let dy = a.1.abs_diff(b.1) as u128;
    let w = width as u128;
    2500 * (dx * dx + dy * dy) <= 49 * w * w
}

/// Step-level Type and SR predicates.
pub fn match_step(pred: &Action, gt: &Action, dims: ScreenDims) -> StepMatch {
    let type_match = pred.kind() == gt.kind();
    let full_match = type_match
        && match (pred, gt) {
            (Action::Click(p), Action::Click(g)) => click_within_radius((p.x, p.y), (g.x, g.y), dims.width()),
            (Action::Scroll(p), Action::Scroll(g)) => p == g,
            (Action::Type(p), Action::Type(g)) => normalize_text(p) == normalize_text(g),
            _ => true,
        };
    StepMatch { type_match, full_match }
}

/// Serde adapter that writes an [`Action`] as its grammar string, for wire
/// formats read by operators. Use with `#[serde(with = "grammar")]`.
pub mod grammar {
    use serde::{Deserialize, Deserializer, Serializer};

    use super::{parse_action, serialize_action};
    use crate::types::Action;

    pub fn serialize<S: Serializer>(action: &Action, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&serialize_action(action))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Action, D::Error> {
        let text = String::deserialize(d)?;
        parse_action(&text).map_err(serde::de::Error::custom)
    }

    pub mod option {
        use serde::{Deserialize, Deserializer, Serializer};

        use crate::codec::{parse_action, serialize_action};
        use crate::types::Action;

        pub fn serialize<S: Serializer>(action: &Option<Action>, s: S) -> Result<S::Ok, S::Error> {
            match action {
                Some(a) => s.serialize_some(&serialize_action(a)),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Action>, D::Error> {
            Option::<String>::deserialize(d)?.map(|t| parse_action(&t).map_err(serde::de::Error::custom)).transpose()
        }
    }
}
