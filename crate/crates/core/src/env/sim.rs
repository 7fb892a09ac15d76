//! Deterministic simulated app: screens, action-triggered transitions and
//! per-instruction goals, loaded from JSON.
//!
//! ```json
//! {
//!   "name": "shop",
//!   "initial": "home",
//!   "screens": { "home": { "dims": {"width": 1080, "height": 2400},
//!                          "payload_ref": {"inline": "aG9tZQ=="} } },
//!   "transitions": [ { "from": "home", "action": "CLICK <540, 210>",
//!                      "region": {"x0": 40, "y0": 160, "x1": 1040, "y1": 260},
//!                      "to": "search" } ],
//!   "goals": { "shop-01": { "screen": "results", "typed": ["milk"] } }
//! }
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{ApplyOutcome, EnvError, Environment};
use crate::codec::{normalize_text, parse_action};
use crate::types::{Action, PayloadRef, ScreenDims, Screenshot, Trajectory};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreenDef {
    pub dims: ScreenDims,
    pub payload_ref: PayloadRef,
}

/// Inclusive axis-aligned rectangle in device pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl Region {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionDef {
    pub from: String,
    /// Serialized action pattern.
    pub action: String,
    /// Tolerance box for CLICK patterns; without one the point must match
    /// exactly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
    pub to: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub screen: Option<String>,
    /// Texts that must have been typed at some point in the episode.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub typed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct SimAppDef {
    #[serde(default)]
    name: String,
    initial: String,
    screens: BTreeMap<String, ScreenDef>,
    #[serde(default)]
    transitions: Vec<TransitionDef>,
    #[serde(default)]
    goals: BTreeMap<String, Goal>,
}

#[derive(Debug, Clone)]
struct Transition {
    from: String,
    pattern: Action,
    region: Option<Region>,
    to: String,
}

impl Transition {
    fn matches(&self, screen: &str, action: &Action) -> bool {
        if self.from != screen {
            return false;
        }
        match (&self.pattern, action) {
            (Action::Click(p), Action::Click(a)) => match self.region {
                Some(region) => region.contains(a.x, a.y),
                None => p == a,
            },
            (Action::Type(p), Action::Type(a)) => normalize_text(p) == normalize_text(a),
            (p, a) => p == a,
        }
    }
}

/// A validated simulated app.
#[derive(Debug, Clone)]
pub struct SimApp {
    def: SimAppDef,
    transitions: Vec<Transition>,
}

/// Position in a [`SimApp`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimState {
    pub screen: String,
    /// Normalized texts typed so far.
    pub typed: Vec<String>,
    /// Actions applied since reset.
    pub steps: u32,
    /// The last action matched no transition.
    pub no_effect: bool,
}

impl SimApp {
    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        let def: SimAppDef = serde_json::from_str(text).map_err(|e| EnvError::InvalidApp(e.to_string()))?;
        Self::from_def(def)
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| EnvError::InvalidApp(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn from_def(def: SimAppDef) -> Result<Self, EnvError> {
        let known = |id: &str, what: &str| {
            if def.screens.contains_key(id) {
                Ok(())
            } else {
                Err(EnvError::InvalidApp(format!("{what} refers to unknown screen {id:?}")))
            }
        };
        known(&def.initial, "initial")?;
        let mut transitions = Vec::with_capacity(def.transitions.len());
        for (i, t) in def.transitions.iter().enumerate() {
            known(&t.from, &format!("transition {i}"))?;
            known(&t.to, &format!("transition {i}"))?;
            let pattern = parse_action(&t.action).map_err(|e| EnvError::InvalidApp(format!("transition {i}: {e}")))?;
            if t.region.is_some() && !matches!(pattern, Action::Click(_)) {
                return Err(EnvError::InvalidApp(format!("transition {i}: region on a non-CLICK pattern")));
            }
            if let Some(r) = t.region {
                if r.x0 > r.x1 || r.y0 > r.y1 {
                    return Err(EnvError::InvalidApp(format!("transition {i}: empty region")));
                }
            }
            transitions.push(Transition { from: t.from.clone(), pattern, region: t.region, to: t.to.clone() });
        }
        for (id, goal) in &def.goals {
            if let Some(screen) = &goal.screen {
                known(screen, &format!("goal {id}"))?;
            }
        }
        Ok(Self { def, transitions })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.def).expect("serializable")
    }

    pub fn name(&self) -> &str {
        &self.def.name
    }

    pub fn initial_state(&self) -> SimState {
        SimState { screen: self.def.initial.clone(), typed: Vec::new(), steps: 0, no_effect: false }
    }

    pub fn goal_ids(&self) -> impl Iterator<Item = &str> {
        self.def.goals.keys().map(String::as_str)
    }

    /// Screenshot of `state`. The id is `<screen>@<steps>`, unique within an
    /// episode and reproducible by replay.
    pub fn screenshot(&self, state: &SimState) -> Screenshot {
        let screen = &self.def.screens[&state.screen];
        Screenshot {
            id: format!("{}@{}", state.screen, state.steps),
            dims: screen.dims,
            payload_ref: screen.payload_ref.clone(),
        }
    }

    /// Applies `action`: the first matching transition wins; PRESS_HOME
    /// returns to the initial screen; anything else leaves the screen as is
    /// and sets `no_effect` (typing still records its text).
    pub fn apply(&self, state: &SimState, action: &Action) -> (SimState, Screenshot) {
        let mut next = state.clone();
        next.steps += 1;
        next.no_effect = false;
        if let Action::Type(text) = action {
            next.typed.push(normalize_text(text));
        }
        if let Some(t) = self.transitions.iter().find(|t| t.matches(&state.screen, action)) {
            next.screen = t.to.clone();
        } else {
            match action {
                Action::PressHome => next.screen = self.def.initial.clone(),
                Action::Type(_) | Action::Complete | Action::Impossible => {}
                _ => next.no_effect = true,
            }
        }
        let shot = self.screenshot(&next);
        (next, shot)
    }

    pub fn goal_satisfied(&self, state: &SimState, instruction_id: &str) -> Result<bool, EnvError> {
        let goal = self
            .def
            .goals
            .get(instruction_id)
            .ok_or_else(|| EnvError::UnknownInstruction(instruction_id.to_string()))?;
        let screen_ok = goal.screen.as_ref().is_none_or(|s| *s == state.screen);
        let typed_ok = goal.typed.iter().all(|t| state.typed.contains(&normalize_text(t)));
        Ok(screen_ok && typed_ok)
    }

    /// Replays `actions` from the initial state; returns the screenshot id
    /// seen before each action and the final state.
    pub fn replay<'a>(&self, actions: impl IntoIterator<Item = &'a Action>) -> (Vec<String>, SimState) {
        let mut state = self.initial_state();
        let mut ids = Vec::new();
        for action in actions {
            ids.push(self.screenshot(&state).id);
            state = self.apply(&state, action).0;
        }
        (ids, state)
    }

    /// Checks that a trajectory recorded against this app is reproduced by
    /// replaying its executed actions.
    pub fn verify_trajectory(&self, traj: &Trajectory) -> Result<(), String> {
        let (ids, _) = self.replay(traj.steps.iter().map(|s| &s.executed_action));
        for (step, id) in traj.steps.iter().zip(&ids) {
            if step.screenshot.id != *id {
                return Err(format!(
                    "step {}: recorded screenshot {} but replay gives {id}",
                    step.index, step.screenshot.id
                ));
            }
        }
        Ok(())
    }
}

/// A [`SimApp`] instance driven through the [`Environment`] trait.
#[derive(Debug, Clone)]
pub struct SimEnv {
    app: Arc<SimApp>,
    state: SimState,
}

impl SimEnv {
    pub fn new(app: Arc<SimApp>) -> Self {
        let state = app.initial_state();
        Self { app, state }
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn app(&self) -> &SimApp {
        &self.app
    }
}

#[async_trait]
impl Environment for SimEnv {
    async fn reset(&mut self) -> Result<(), EnvError> {
        self.state = self.app.initial_state();
        Ok(())
    }

    async fn screenshot(&mut self) -> Result<Screenshot, EnvError> {
        Ok(self.app.screenshot(&self.state))
    }

    async fn apply(&mut self, action: &Action) -> Result<ApplyOutcome, EnvError> {
        let (next, _) = self.app.apply(&self.state, action);
        self.state = next;
        Ok(ApplyOutcome { no_effect: self.state.no_effect })
    }

    fn goal_satisfied(&self, instruction_id: &str) -> Result<bool, EnvError> {
        self.app.goal_satisfied(&self.state, instruction_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ScrollDir;

    fn app() -> SimApp {
        SimApp::from_json(
            r#"{
              "name": "shop",
              "initial": "home",
              "screens": {
                "home":    {"dims": {"width": 1080, "height": 2400}, "payload_ref": {"inline": "aG9tZQ=="}},
                "search":  {"dims": {"width": 1080, "height": 2400}, "payload_ref": {"inline": "c2VhcmNo"}},
                "results": {"dims": {"width": 1080, "height": 2400}, "payload_ref": {"file": "results.png"}}
              },
              "transitions": [
                {"from": "home", "action": "CLICK <540, 210>",
                 "region": {"x0": 40, "y0": 160, "x1": 1040, "y1": 260}, "to": "search"},
                {"from": "search", "action": "TYPE [milk]", "to": "results"},
                {"from": "results", "action": "PRESS_BACK", "to": "search"}
              ],
              "goals": {"g1": {"screen": "results", "typed": ["Milk"]}}
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn click_inside_box_follows_transition() {
        let app = app();
        let (s, shot) = app.apply(&app.initial_state(), &Action::click(100, 200));
        assert_eq!(s.screen, "search");
        assert_eq!(shot.id, "search@1");
        assert!(!s.no_effect);
        let (s, _) = app.apply(&app.initial_state(), &Action::click(100, 300));
        assert_eq!(s.screen, "home");
        assert!(s.no_effect);
    }

    #[test]
    fn unmatched_scroll_is_a_self_loop() {
        let app = app();
        let (s, _) = app.apply(&app.initial_state(), &Action::Scroll(ScrollDir::Up));
        assert_eq!(s.screen, "home");
        assert!(s.no_effect);
    }

    #[test]
    fn press_home_returns_to_initial() {
        let app = app();
        let (_, deep) = app.replay([&Action::click(540, 210), &Action::typed("milk")]);
        assert_eq!(deep.screen, "results");
        let (s, _) = app.apply(&deep, &Action::PressHome);
        assert_eq!(s.screen, "home");
        assert!(!s.no_effect);
    }

    #[test]
    fn goal_predicate() {
        let app = app();
        let (_, done) = app.replay([&Action::click(540, 210), &Action::typed(" MILK ")]);
        assert!(app.goal_satisfied(&done, "g1").unwrap());

        let mut no_text = done.clone();
        no_text.typed.clear();
        assert!(!app.goal_satisfied(&no_text, "g1").unwrap());

        assert_eq!(app.goal_satisfied(&done, "nope").unwrap_err(), EnvError::UnknownInstruction("nope".into()));
    }

    #[test]
    fn replay_is_deterministic() {
        let app = app();
        let actions = [Action::click(540, 210), Action::typed("milk"), Action::PressBack];
        assert_eq!(app.replay(&actions), app.replay(&actions));
        assert_eq!(app.replay(&actions).0, vec!["home@0", "search@1", "results@2"]);
    }

    #[test]
    fn invalid_definitions_rejected() {
        let bad_initial = r#"{"initial": "x", "screens": {}}"#;
        assert!(matches!(SimApp::from_json(bad_initial), Err(EnvError::InvalidApp(_))));
        let bad_target = r#"{"initial": "a",
            "screens": {"a": {"dims": {"width": 1, "height": 1}, "payload_ref": {"file": "a"}}},
            "transitions": [{"from": "a", "action": "PRESS_BACK", "to": "b"}]}"#;
        assert!(matches!(SimApp::from_json(bad_target), Err(EnvError::InvalidApp(_))));
        let bad_pattern = r#"{"initial": "a",
            "screens": {"a": {"dims": {"width": 1, "height": 1}, "payload_ref": {"file": "a"}}},
            "transitions": [{"from": "a", "action": "TAP", "to": "a"}]}"#;
        assert!(matches!(SimApp::from_json(bad_pattern), Err(EnvError::InvalidApp(_))));
    }
}
