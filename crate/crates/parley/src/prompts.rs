//! Prompt templates and their builders.
//!
//! Templates ship as data files under `templates/` and are compiled in as
//! defaults; any of them can be overridden from a directory at runtime.
//! Substitution is a single pass, so substituted values are never rescanned
//! and the literal `{...}` format examples inside the templates survive.

use crate::dialogue::{render_transcript, DialogueRecord};
use crate::profile::TaskProfile;
use std::path::Path;

pub const AGENT_PROMPT: &str = include_str!("../templates/agent_prompt.txt");
pub const SSI_FOOTNOTE: &str = include_str!("../templates/ssi_footnote.txt");
pub const STEP_RATING: &str = include_str!("../templates/step_rating.txt");
pub const RELEVANCE: &str = include_str!("../templates/relevance.txt");
pub const DIMENSION_JUDGE: &str = include_str!("../templates/dimension_judge.txt");
pub const WORKFLOW_RESOURCE_UTILITY: &str = include_str!("../templates/workflow_resource_utility.txt");
pub const WORKFLOW_RESOURCE_DRAFT: &str = include_str!("../templates/workflow_resource_draft.txt");
pub const WORKFLOW_DIFFERENCE_GUESS: &str = include_str!("../templates/workflow_difference_guess.txt");
pub const WORKFLOW_DIFFERENCE_DRAFT: &str = include_str!("../templates/workflow_difference_draft.txt");
pub const WORKFLOW_INITIAL_PROPOSAL: &str = include_str!("../templates/workflow_initial_proposal.txt");
pub const WORKFLOW_UPDATE_PROPOSAL: &str = include_str!("../templates/workflow_update_proposal.txt");
pub const WORKFLOW_STYLE_TRANSFER: &str = include_str!("../templates/workflow_style_transfer.txt");

/// The full template set used by one run.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub agent_prompt: String,
    pub ssi_footnote: String,
    pub step_rating: String,
    pub relevance: String,
    pub dimension_judge: String,
    pub workflow_resource_utility: String,
    pub workflow_resource_draft: String,
    pub workflow_difference_guess: String,
    pub workflow_difference_draft: String,
    pub workflow_initial_proposal: String,
    pub workflow_update_proposal: String,
    pub workflow_style_transfer: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            agent_prompt: AGENT_PROMPT.into(),
            ssi_footnote: SSI_FOOTNOTE.into(),
            step_rating: STEP_RATING.into(),
            relevance: RELEVANCE.into(),
            dimension_judge: DIMENSION_JUDGE.into(),
            workflow_resource_utility: WORKFLOW_RESOURCE_UTILITY.into(),
            workflow_resource_draft: WORKFLOW_RESOURCE_DRAFT.into(),
            workflow_difference_guess: WORKFLOW_DIFFERENCE_GUESS.into(),
            workflow_difference_draft: WORKFLOW_DIFFERENCE_DRAFT.into(),
            workflow_initial_proposal: WORKFLOW_INITIAL_PROPOSAL.into(),
            workflow_update_proposal: WORKFLOW_UPDATE_PROPOSAL.into(),
            workflow_style_transfer: WORKFLOW_STYLE_TRANSFER.into(),
        }
    }
}

impl PromptSet {
    /// Default set with any same-named `.txt` files in `dir` overriding.
    pub fn with_overrides(dir: &Path) -> std::io::Result<Self> {
        let mut set = Self::default();
        let load = |name: &str, slot: &mut String| -> std::io::Result<()> {
            let path = dir.join(name);
            if path.exists() {
                *slot = std::fs::read_to_string(path)?;
            }
            Ok(())
        };
        load("agent_prompt.txt", &mut set.agent_prompt)?;
        load("ssi_footnote.txt", &mut set.ssi_footnote)?;
        load("step_rating.txt", &mut set.step_rating)?;
        load("relevance.txt", &mut set.relevance)?;
        load("dimension_judge.txt", &mut set.dimension_judge)?;
        load("workflow_resource_utility.txt", &mut set.workflow_resource_utility)?;
        load("workflow_resource_draft.txt", &mut set.workflow_resource_draft)?;
        load("workflow_difference_guess.txt", &mut set.workflow_difference_guess)?;
        load("workflow_difference_draft.txt", &mut set.workflow_difference_draft)?;
        load("workflow_initial_proposal.txt", &mut set.workflow_initial_proposal)?;
        load("workflow_update_proposal.txt", &mut set.workflow_update_proposal)?;
        load("workflow_style_transfer.txt", &mut set.workflow_style_transfer)?;
        Ok(set)
    }
}

/// Replaces `{token}` occurrences with their values in one left-to-right
/// pass. Unknown tokens and stray braces pass through unchanged; values are
/// never rescanned.
pub fn render_template(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let after = &rest[pos..];
        if let Some(end) = after.find('}') {
            let token = &after[1..end];
            if let Some((_, value)) = vars.iter().find(|(key, _)| *key == token) {
                out.push_str(value);
                rest = &after[end + 1..];
                continue;
            }
        }
        out.push('{');
        rest = &after[1..];
    }
    out.push_str(rest);
    out
}

/// One agent's background paragraph: background, personality, and (for the
/// viewing agent only) the secrets line labelled with the first name.
pub fn background_block(task: &TaskProfile, agent_index: usize, include_secrets: bool) -> String {
    let agent = task.agent(agent_index);
    let mut block = format!(
        "{} Personality and values description: {}",
        agent.background, agent.personality
    );
    if include_secrets && !agent.secrets.trim().is_empty() {
        block.push_str(&format!(" {}'s secrets: {}", agent.first_name(), agent.secrets));
    }
    block
}

/// The shared context block. With `viewer = Some(i)`, only agent `i`'s goal
/// and secrets are visible (the partner's goal renders as "Unknown"); with
/// `viewer = None` the block is omniscient, as the rating judge requires.
pub fn context_block(task: &TaskProfile, viewer: Option<usize>) -> String {
    let goal = |i: usize| match viewer {
        Some(v) if v != i => "Unknown".to_string(),
        _ => task.agent(i).goal.clone(),
    };
    let secrets_visible = |i: usize| viewer.map_or(true, |v| v == i);
    format!(
        "Scenario: {}\n\nParticipants: {} and {}\n\n{}'s background: {}\n\n{}'s background: {}\n\n{}'s goal: {} {}'s goal: {}",
        task.scenario,
        task.agent(0).name,
        task.agent(1).name,
        task.agent(0).name,
        background_block(task, 0, secrets_visible(0)),
        task.agent(1).name,
        background_block(task, 1, secrets_visible(1)),
        task.agent(0).name,
        goal(0),
        task.agent(1).name,
        goal(1),
    )
}

/// Builds the full acting prompt for `actor_index` at `turn_index`, with the
/// transcript of all earlier turns. This same text is the SFT input format.
pub fn build_agent_prompt(
    prompts: &PromptSet,
    task: &TaskProfile,
    record: &DialogueRecord,
    turn_index: usize,
    actor_index: usize,
) -> String {
    let history = render_transcript(record, turn_index);
    let goal = |i: usize| {
        if i == actor_index {
            task.agent(i).goal.clone()
        } else {
            "Unknown".to_string()
        }
    };
    render_template(
        &prompts.agent_prompt,
        &[
            ("actor_name", &task.agent(actor_index).name),
            ("scenario", &task.scenario),
            ("agent1_name", &task.agent(0).name),
            ("agent2_name", &task.agent(1).name),
            ("agent1_background", &background_block(task, 0, actor_index == 0)),
            ("agent2_background", &background_block(task, 1, actor_index == 1)),
            ("agent1_goal", &goal(0)),
            ("agent2_goal", &goal(1)),
            ("history", &history),
            ("turn_index", &turn_index.to_string()),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::Action;
    use crate::dialogue::{Turn, TurnStrategy};
    use crate::profile::AgentProfile;

    fn task() -> TaskProfile {
        TaskProfile {
            task_id: "t".into(),
            scenario: "A charity event.".into(),
            agents: [
                AgentProfile {
                    name: "Hendrick Heinz".into(),
                    background: "Hendrick is a chef.".into(),
                    personality: "Impulsive.".into(),
                    secrets: "Faked credentials.".into(),
                    goal: "Raise the donation.".into(),
                },
                AgentProfile {
                    name: "Ethan Smith".into(),
                    background: "Ethan is a developer.".into(),
                    personality: "Reserved.".into(),
                    secrets: "Donates secretly.".into(),
                    goal: "Stay in budget.".into(),
                },
            ],
            hard_flag: true,
        }
    }

    fn record_with(turns: Vec<Turn>) -> DialogueRecord {
        DialogueRecord {
            task: task(),
            starter_index: 0,
            turns,
            nsi_used: false,
            final_goal_c: None,
            attempt_number: 1,
        }
    }

    #[test]
    fn render_template_is_single_pass() {
        let out = render_template("{a} and {b}", &[("a", "{b}"), ("b", "two")]);
        assert_eq!(out, "{b} and two");
    }

    #[test]
    fn render_template_keeps_literal_braces() {
        let out = render_template("x {'key': ''} {a}", &[("a", "y")]);
        assert_eq!(out, "x {'key': ''} y");
    }

    #[test]
    fn actor_goal_visible_partner_goal_unknown() {
        let rec = record_with(vec![]);
        let prompt = build_agent_prompt(&PromptSet::default(), &task(), &rec, 0, 0);
        assert!(prompt.contains("Hendrick Heinz's goal: Raise the donation."));
        assert!(prompt.contains("Ethan Smith's goal: Unknown"));
        assert!(prompt.contains("Hendrick's secrets: Faked credentials."));
        assert!(!prompt.contains("Donates secretly."));
        assert!(prompt.contains("You are at Turn #0"));
        assert!(prompt.contains("Your available action types are 'none' 'action' 'speak' 'non-verbal communication' 'leave'."));
    }

    #[test]
    fn history_appears_between_start_and_turn_marker() {
        let turns = vec![Turn {
            index: 0,
            agent_index: 0,
            action: Action::speak("hello"),
            strategy: TurnStrategy::Init,
            rating: None,
        }];
        let rec = record_with(turns);
        let prompt = build_agent_prompt(&PromptSet::default(), &task(), &rec, 1, 1);
        let start = prompt.find("Conversation Starts:").unwrap();
        let turn0 = prompt.find("Turn #0\nHendrick Heinz said: \"hello\"").unwrap();
        let marker = prompt.find("You are at Turn #1").unwrap();
        assert!(start < turn0 && turn0 < marker);
    }

    #[test]
    fn omniscient_context_shows_both_goals() {
        let block = context_block(&task(), None);
        assert!(block.contains("Raise the donation."));
        assert!(block.contains("Stay in budget."));
        assert!(block.contains("Faked credentials."));
        assert!(block.contains("Donates secretly."));
    }
}
