//! Turn and dialogue records plus the canonical transcript rendering.
//!
//! Rendering is a fixed table so transcripts are byte-stable: golden tests
//! and prompt construction both depend on it.

use crate::action::{Action, ActionType};
use crate::profile::TaskProfile;
use crate::rater::StepRating;
use serde::{Deserialize, Serialize};

/// How a turn was produced: the six initialization turns, the expert's
/// native strategy, the simple injected prompt, or the negotiation workflow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TurnStrategy {
    #[serde(rename = "INIT")]
    Init,
    #[serde(rename = "NSC")]
    Nsc,
    #[serde(rename = "SSI")]
    Ssi,
    #[serde(rename = "NSI")]
    Nsi,
}

impl TurnStrategy {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::Init => "INIT",
            Self::Nsc => "NSC",
            Self::Ssi => "SSI",
            Self::Nsi => "NSI",
        }
    }
}

/// One turn: who acted, what they did, how it was generated, and the step
/// rating taken after it (when rating was active).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Turn {
    pub index: usize,
    pub agent_index: usize,
    pub action: Action,
    pub strategy: TurnStrategy,
    pub rating: Option<StepRating>,
}

/// A complete generated dialogue for one task attempt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub task: TaskProfile,
    pub starter_index: usize,
    pub turns: Vec<Turn>,
    pub nsi_used: bool,
    /// goal_c pair from the last step rating taken, indexed by task agent.
    pub final_goal_c: Option<[f64; 2]>,
    pub attempt_number: usize,
}

impl DialogueRecord {
    /// Scalar fed to filtering: the two-agent mean of the final goal_c pair.
    pub fn final_goal_scalar(&self) -> Option<f64> {
        self.final_goal_c.map(|[a, b]| (a + b) / 2.0)
    }

    /// All turns acted by one agent, in order.
    pub fn turns_of(&self, agent_index: usize) -> Vec<&Turn> {
        self.turns.iter().filter(|t| t.agent_index == agent_index).collect()
    }
}

/// Fixed rendering table for transcript lines. The content half (without
/// the speaker name) is what [`action_content`] returns.
fn render_parts(action: &Action) -> (&'static str, String) {
    match action.action_type {
        ActionType::Speak => ("said: ", format!("\"{}\"", action.argument)),
        ActionType::Leave => ("", "left the conversation".to_string()),
        ActionType::None => ("", "did nothing".to_string()),
        ActionType::Action | ActionType::NonVerbal => ("", action.argument.clone()),
    }
}

/// Renders one action as a transcript line, e.g. `Mia said: "hello"`.
pub fn render_action(name: &str, action: &Action) -> String {
    let (connective, content) = render_parts(action);
    format!("{name} {connective}{content}")
}

/// Deterministic transcript of the first `upto` turns. Each turn renders as
/// a `Turn #k` header plus the action line; output for `upto = k` is a byte
/// prefix of the output for `upto = k + 1`.
pub fn render_transcript(record: &DialogueRecord, upto: usize) -> String {
    let mut out = String::new();
    for turn in record.turns.iter().take(upto) {
        let name = &record.task.agents[turn.agent_index].name;
        out.push_str(&format!("Turn #{}\n{}\n\n", turn.index, render_action(name, &turn.action)));
    }
    out
}

/// The action content with any rendered name prefix removed; this is the
/// embedding input for the diversity metric, so identical speaker names must
/// not inflate similarity.
pub fn action_content(turn: &Turn, speaker_name: &str) -> String {
    let (_, content) = render_parts(&turn.action);
    let content = match turn.action.action_type {
        ActionType::Speak => turn.action.argument.clone(),
        _ => content,
    };
    strip_name_prefix(&content, speaker_name)
}

/// Removes a leading `Name said: ` / `Name: ` / `Name ` echo (models
/// occasionally repeat the rendered prefix inside the argument), plus any
/// quotes wrapping the remainder.
fn strip_name_prefix(text: &str, name: &str) -> String {
    let Some(rest) = text.strip_prefix(name) else {
        return text.to_string();
    };
    let rest = rest.trim_start();
    let rest = rest
        .strip_prefix("said:")
        .or_else(|| rest.strip_prefix(':'))
        .map(str::trim_start)
        .unwrap_or(rest);
    let rest = rest
        .strip_prefix('"')
        .and_then(|r| r.strip_suffix('"'))
        .unwrap_or(rest);
    rest.to_string()
}
