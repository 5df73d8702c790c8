//! The negotiation workflow: a four-phase state machine that guides both
//! agents from stating their interests to a mutually confirmed proposal.
//!
//! Resource Assessment and Assessment of Difference each take one emission
//! per agent, as does Initial Proposal; Update Proposal loops until two
//! consecutive Confirm options land. Every emission is produced by a
//! draft-then-style-transfer chain, with the structured stage writing
//! utility sheets that are re-normalized and versioned on every update.

use crate::action::Action;
use crate::dialogue::{render_transcript, DialogueRecord};
use crate::gateway::{extract_object, ChatSettings, Gateway, GatewayError, WireLog};
use crate::profile::TaskProfile;
use crate::prompts::{render_template, PromptSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const RANGE_TOLERANCE: f64 = 1e-6;

/// One utility item: value `u` in [0, 10], weight `w` (sheet-normalized to
/// sum 1), fulfillment ratio `r` in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityItem {
    pub name: String,
    pub description: String,
    pub u: f64,
    pub w: f64,
    pub r: f64,
}

/// One agent's utility decomposition of its goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilitySheet {
    pub owner: usize,
    pub items: Vec<UtilityItem>,
    pub version: u32,
}

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("emission out of turn: {0}")]
    EmissionOutOfTurn(String),
    #[error("update reply lacks the option field")]
    MissingOptionField,
    #[error("invalid utility: {0}")]
    InvalidUtility(String),
    #[error("workflow reply failed schema validation after retries: {0}")]
    SchemaError(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn clamp_into(value: f64, low: f64, high: f64, what: &str) -> Result<f64, WorkflowError> {
    if !value.is_finite() || value < low - RANGE_TOLERANCE || value > high + RANGE_TOLERANCE {
        return Err(WorkflowError::InvalidUtility(format!(
            "{what} = {value} outside [{low}, {high}]"
        )));
    }
    Ok(value.clamp(low, high))
}

impl UtilitySheet {
    /// Builds a sheet at version 1: validates ranges (with a small clamping
    /// tolerance) and normalizes the weights to sum 1.
    pub fn new(owner: usize, items: Vec<UtilityItem>) -> Result<Self, WorkflowError> {
        let items = Self::normalize(items)?;
        Ok(Self { owner, items, version: 1 })
    }

    fn normalize(mut items: Vec<UtilityItem>) -> Result<Vec<UtilityItem>, WorkflowError> {
        if items.is_empty() {
            return Err(WorkflowError::InvalidUtility("sheet has no items".into()));
        }
        let mut total = 0.0;
        for item in &mut items {
            item.u = clamp_into(item.u, 0.0, 10.0, "u")?;
            item.r = clamp_into(item.r, 0.0, 1.0, "r")?;
            if !item.w.is_finite() || item.w < -RANGE_TOLERANCE {
                return Err(WorkflowError::InvalidUtility(format!("w = {} negative", item.w)));
            }
            item.w = item.w.max(0.0);
            total += item.w;
        }
        if total <= 0.0 {
            return Err(WorkflowError::InvalidUtility("weights sum to zero".into()));
        }
        for item in &mut items {
            item.w /= total;
        }
        Ok(items)
    }

    /// Revalidates and renormalizes replacement items, bumping the version.
    pub fn updated(&self, items: Vec<UtilityItem>) -> Result<Self, WorkflowError> {
        let items = Self::normalize(items)?;
        Ok(Self { owner: self.owner, items, version: self.version + 1 })
    }

    pub fn items_json(&self) -> String {
        serde_json::json!({ "items": self.items }).to_string()
    }
}

/// U = (1/n) Σ w_i r_i u_i over the sheet's n items.
pub fn utility_value(sheet: &UtilitySheet) -> f64 {
    let n = sheet.items.len() as f64;
    sheet.items.iter().map(|i| i.w * i.r * i.u).sum::<f64>() / n
}

/// The three Update Proposal options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateOption {
    #[serde(rename = "present_proposal")]
    Present,
    #[serde(rename = "revise_proposal")]
    Revise,
    #[serde(rename = "confirm_proposal")]
    Confirm,
}

impl UpdateOption {
    fn from_tag(tag: &str) -> Option<Self> {
        match tag.trim() {
            "present_proposal" | "present" => Some(Self::Present),
            "revise_proposal" | "revise" => Some(Self::Revise),
            "confirm_proposal" | "confirm" => Some(Self::Confirm),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    ResourceAssessment,
    AssessDifference,
    InitialProposal,
    UpdateProposal,
    Complete,
}

impl Phase {
    fn next(self) -> Self {
        match self {
            Self::ResourceAssessment => Self::AssessDifference,
            Self::AssessDifference => Self::InitialProposal,
            Self::InitialProposal => Self::UpdateProposal,
            Self::UpdateProposal | Self::Complete => Self::Complete,
        }
    }
}

/// Workflow bookkeeping: phase progress, whose emission is pending, the
/// confirm streak, and both agents' own and guessed utility sheets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkflowState {
    pub phase: Phase,
    pub pending_agent: usize,
    pub emissions_in_phase: u8,
    pub confirm_streak: u8,
    pub own_sheets: [Option<UtilitySheet>; 2],
    pub guessed_sheets: [Option<UtilitySheet>; 2],
}

impl WorkflowState {
    pub fn new(first_agent: usize) -> Self {
        Self {
            phase: Phase::ResourceAssessment,
            pending_agent: first_agent,
            emissions_in_phase: 0,
            confirm_streak: 0,
            own_sheets: [None, None],
            guessed_sheets: [None, None],
        }
    }
}

/// Advances the state machine by one emission. Fixed phases require one
/// emission per agent before advancing; Update Proposal loops, Confirm
/// increments the streak, Present/Revise reset it, and a streak of two
/// completes the workflow. The pending agent alternates every call.
pub fn advance(
    state: &WorkflowState,
    _emitted: &Action,
    option: Option<UpdateOption>,
) -> Result<WorkflowState, WorkflowError> {
    let mut next = state.clone();
    match state.phase {
        Phase::Complete => {
            return Err(WorkflowError::EmissionOutOfTurn("workflow already complete".into()))
        }
        Phase::ResourceAssessment | Phase::AssessDifference | Phase::InitialProposal => {
            if option.is_some() {
                return Err(WorkflowError::EmissionOutOfTurn(
                    "update option outside Update Proposal".into(),
                ));
            }
            next.emissions_in_phase += 1;
            if next.emissions_in_phase == 2 {
                next.phase = state.phase.next();
                next.emissions_in_phase = 0;
            }
        }
        Phase::UpdateProposal => {
            let option = option.ok_or_else(|| {
                WorkflowError::EmissionOutOfTurn("Update Proposal emission without option".into())
            })?;
            match option {
                UpdateOption::Confirm => next.confirm_streak += 1,
                UpdateOption::Present | UpdateOption::Revise => next.confirm_streak = 0,
            }
            if next.confirm_streak >= 2 {
                next.phase = Phase::Complete;
            }
        }
    }
    next.pending_agent = 1 - state.pending_agent;
    Ok(next)
}

fn number_from(value: &serde_json::Value) -> Option<f64> {
    match value {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

/// Parses an `{"items": [...]}` object into utility items.
pub fn parse_items(reply: &serde_json::Value) -> Result<Vec<UtilityItem>, WorkflowError> {
    let items = reply
        .get("items")
        .and_then(|v| v.as_array())
        .ok_or_else(|| WorkflowError::InvalidUtility("reply lacks items array".into()))?;
    items
        .iter()
        .map(|item| {
            Ok(UtilityItem {
                name: item["name"].as_str().unwrap_or_default().to_string(),
                description: item["description"].as_str().unwrap_or_default().to_string(),
                u: number_from(&item["u"])
                    .ok_or_else(|| WorkflowError::InvalidUtility("u not numeric".into()))?,
                w: number_from(&item["w"])
                    .ok_or_else(|| WorkflowError::InvalidUtility("w not numeric".into()))?,
                r: number_from(&item["r"])
                    .ok_or_else(|| WorkflowError::InvalidUtility("r not numeric".into()))?,
            })
        })
        .collect()
}

/// Reads the declared option and the revised own sheet out of a Step-4
/// reply. The returned sheet is re-normalized with the version bumped.
pub fn classify_update(
    reply: &serde_json::Value,
    prev: &UtilitySheet,
) -> Result<(UpdateOption, UtilitySheet), WorkflowError> {
    let tag = reply
        .get("option")
        .and_then(|v| v.as_str())
        .ok_or(WorkflowError::MissingOptionField)?;
    let option = UpdateOption::from_tag(tag)
        .ok_or_else(|| WorkflowError::EmissionOutOfTurn(format!("unknown option {tag:?}")))?;
    let items = match reply.get("utility") {
        Some(utility) => parse_items(utility)?,
        None => prev.items.clone(),
    };
    Ok((option, prev.updated(items)?))
}

/// Shared handles for workflow generation calls.
pub struct WorkflowCtx<'a> {
    pub gateway: &'a Gateway,
    pub settings: &'a ChatSettings,
    pub prompts: &'a PromptSet,
    pub log: Option<&'a WireLog>,
    pub schema_retries: u32,
}

impl WorkflowCtx<'_> {
    fn text(&self, prompt: String) -> Result<String, WorkflowError> {
        Ok(self.gateway.chat(&self.settings.request("", prompt))?.trim().to_string())
    }

    /// Structured call with schema retries: re-issues the same prompt until
    /// `parse` accepts the first balanced object of the reply.
    fn structured<T>(
        &self,
        prompt: &str,
        parse: impl Fn(&serde_json::Value) -> Result<T, WorkflowError>,
    ) -> Result<T, WorkflowError> {
        let request = self.settings.request("", prompt.to_string());
        let mut last = String::from("no attempts made");
        for _ in 0..=self.schema_retries {
            let reply = self.gateway.chat(&request)?;
            match extract_object(&reply).map_err(WorkflowError::from).and_then(|v| parse(&v)) {
                Ok(value) => return Ok(value),
                Err(WorkflowError::Gateway(GatewayError::NoObjectFound)) => {
                    last = "no balanced object in reply".into();
                }
                Err(err) => last = err.to_string(),
            }
        }
        Err(WorkflowError::SchemaError(last))
    }

    fn note(&self, task: &TaskProfile, payload: serde_json::Value) {
        if let Some(log) = self.log {
            let mut entry = payload;
            entry["task_id"] = serde_json::Value::String(task.task_id.clone());
            log.note("workflow", entry);
        }
    }
}

/// A live workflow bound to one dialogue.
pub struct WorkflowSession {
    pub state: WorkflowState,
}

impl WorkflowSession {
    pub fn new(first_agent: usize) -> Self {
        Self { state: WorkflowState::new(first_agent) }
    }

    pub fn is_complete(&self) -> bool {
        self.state.phase == Phase::Complete
    }

    fn sheet_json(&self, slot: &Option<UtilitySheet>) -> String {
        slot.as_ref().map(UtilitySheet::items_json).unwrap_or_else(|| "{\"items\": []}".into())
    }

    /// Generates the pending agent's next emission, running the phase's
    /// prompt chain and advancing the state machine. Returns the action and
    /// whether this emission completed the workflow.
    pub fn next_emission(
        &mut self,
        ctx: &WorkflowCtx<'_>,
        task: &TaskProfile,
        record: &DialogueRecord,
    ) -> Result<(Action, bool), WorkflowError> {
        let agent = self.state.pending_agent;
        let actor = task.agent(agent);
        let partner = task.partner(agent);
        let history = render_transcript(record, record.turns.len());
        let history = if history.is_empty() { "(no turns yet)".to_string() } else { history };

        let (text, option) = match self.state.phase {
            Phase::Complete => {
                return Err(WorkflowError::EmissionOutOfTurn("workflow already complete".into()))
            }
            Phase::ResourceAssessment => {
                let prompt = render_template(
                    &ctx.prompts.workflow_resource_utility,
                    &[
                        ("actor_name", actor.name.as_str()),
                        ("scenario", task.scenario.as_str()),
                        ("goal", actor.goal.as_str()),
                        ("history", history.as_str()),
                    ],
                );
                let items = ctx.structured(&prompt, parse_items)?;
                let sheet = UtilitySheet::new(agent, items)?;
                ctx.note(task, serde_json::json!({
                    "stage": "resource_assessment", "agent": agent,
                    "utility": sheet.items, "value": utility_value(&sheet),
                }));
                let draft = ctx.text(render_template(
                    &ctx.prompts.workflow_resource_draft,
                    &[
                        ("actor_name", actor.name.as_str()),
                        ("utility_json", sheet.items_json().as_str()),
                    ],
                ))?;
                self.state.own_sheets[agent] = Some(sheet);
                ctx.note(task, serde_json::json!({
                    "stage": "resource_assessment_draft", "agent": agent, "draft": draft,
                }));
                (self.style_transfer(ctx, task, agent, &history, &draft)?, None)
            }
            Phase::AssessDifference => {
                let prompt = render_template(
                    &ctx.prompts.workflow_difference_guess,
                    &[
                        ("actor_name", actor.name.as_str()),
                        ("scenario", task.scenario.as_str()),
                        ("goal", actor.goal.as_str()),
                        ("history", history.as_str()),
                        ("partner_name", partner.name.as_str()),
                    ],
                );
                let items = ctx.structured(&prompt, parse_items)?;
                let guess = UtilitySheet::new(1 - agent, items)?;
                ctx.note(task, serde_json::json!({
                    "stage": "difference_guess", "agent": agent, "guessed_utility": guess.items,
                }));
                let own_json = self.sheet_json(&self.state.own_sheets[agent]);
                let draft = ctx.text(render_template(
                    &ctx.prompts.workflow_difference_draft,
                    &[
                        ("actor_name", actor.name.as_str()),
                        ("utility_json", own_json.as_str()),
                        ("opponent_utility_json", guess.items_json().as_str()),
                        ("partner_name", partner.name.as_str()),
                    ],
                ))?;
                self.state.guessed_sheets[agent] = Some(guess);
                ctx.note(task, serde_json::json!({
                    "stage": "difference_draft", "agent": agent, "draft": draft,
                }));
                (self.style_transfer(ctx, task, agent, &history, &draft)?, None)
            }
            Phase::InitialProposal => {
                let own_json = self.sheet_json(&self.state.own_sheets[agent]);
                let guess_json = self.sheet_json(&self.state.guessed_sheets[agent]);
                let draft = ctx.text(render_template(
                    &ctx.prompts.workflow_initial_proposal,
                    &[
                        ("actor_name", actor.name.as_str()),
                        ("utility_json", own_json.as_str()),
                        ("opponent_utility_json", guess_json.as_str()),
                        ("history", history.as_str()),
                        ("partner_name", partner.name.as_str()),
                    ],
                ))?;
                ctx.note(task, serde_json::json!({
                    "stage": "initial_proposal_draft", "agent": agent, "draft": draft,
                }));
                (self.style_transfer(ctx, task, agent, &history, &draft)?, None)
            }
            Phase::UpdateProposal => {
                let own_json = self.sheet_json(&self.state.own_sheets[agent]);
                let guess_json = self.sheet_json(&self.state.guessed_sheets[agent]);
                let prompt = render_template(
                    &ctx.prompts.workflow_update_proposal,
                    &[
                        ("actor_name", actor.name.as_str()),
                        ("utility_json", own_json.as_str()),
                        ("opponent_utility_json", guess_json.as_str()),
                        ("history", history.as_str()),
                        ("partner_name", partner.name.as_str()),
                    ],
                );
                let prev = self.state.own_sheets[agent].clone().ok_or_else(|| {
                    WorkflowError::EmissionOutOfTurn("Update Proposal before Resource Assessment".into())
                })?;
                let (option, sheet, guess_items, draft) = ctx.structured(&prompt, |reply| {
                    let (option, sheet) = classify_update(reply, &prev)?;
                    let guess_items = match reply.get("opponent_utility") {
                        Some(value) => Some(parse_items(value)?),
                        None => None,
                    };
                    let draft = reply
                        .get("draft")
                        .and_then(|v| v.as_str())
                        .map(str::to_string)
                        .ok_or_else(|| WorkflowError::InvalidUtility("update reply lacks draft".into()))?;
                    Ok((option, sheet, guess_items, draft))
                })?;
                ctx.note(task, serde_json::json!({
                    "stage": "update_proposal", "agent": agent,
                    "option": option, "utility": sheet.items,
                    "value": utility_value(&sheet), "draft": draft,
                }));
                self.state.own_sheets[agent] = Some(sheet);
                if let Some(items) = guess_items {
                    let updated = match &self.state.guessed_sheets[agent] {
                        Some(prev_guess) => prev_guess.updated(items)?,
                        None => UtilitySheet::new(1 - agent, items)?,
                    };
                    self.state.guessed_sheets[agent] = Some(updated);
                }
                let completing = option == UpdateOption::Confirm && self.state.confirm_streak == 1;
                let text = if completing {
                    // The closing confirm hands back to the dialogue; it is
                    // spoken as-is, without a style-transfer pass.
                    draft
                } else {
                    self.style_transfer(ctx, task, agent, &history, &draft)?
                };
                (text, Some(option))
            }
        };

        let action = Action::speak(text);
        self.state = advance(&self.state, &action, option)?;
        Ok((action, self.is_complete()))
    }

    fn style_transfer(
        &self,
        ctx: &WorkflowCtx<'_>,
        task: &TaskProfile,
        agent: usize,
        history: &str,
        draft: &str,
    ) -> Result<String, WorkflowError> {
        let actor = task.agent(agent);
        let text = ctx.text(render_template(
            &ctx.prompts.workflow_style_transfer,
            &[
                ("actor_name", actor.name.as_str()),
                ("personality", actor.personality.as_str()),
                ("history", history),
                ("draft", draft),
            ],
        ))?;
        ctx.note(task, serde_json::json!({
            "stage": "style_transfer", "agent": agent, "text": text,
        }));
        Ok(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn item(u: f64, w: f64, r: f64) -> UtilityItem {
        UtilityItem { name: "i".into(), description: String::new(), u, w, r }
    }

    #[test]
    fn single_full_item_is_worth_its_value() {
        let sheet = UtilitySheet::new(0, vec![item(10.0, 1.0, 1.0)]).unwrap();
        assert_eq!(utility_value(&sheet), 10.0);
    }

    #[test]
    fn two_item_hand_computation() {
        let sheet =
            UtilitySheet::new(0, vec![item(10.0, 0.5, 1.0), item(0.0, 0.5, 1.0)]).unwrap();
        assert!((utility_value(&sheet) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn zero_ratios_annihilate() {
        let sheet =
            UtilitySheet::new(0, vec![item(9.0, 0.3, 0.0), item(5.0, 0.7, 0.0)]).unwrap();
        assert_eq!(utility_value(&sheet), 0.0);
    }

    #[test]
    fn weights_renormalize_to_one() {
        let sheet = UtilitySheet::new(0, vec![item(5.0, 1.2, 0.5), item(5.0, 0.8, 0.5)]).unwrap();
        let total: f64 = sheet.items.iter().map(|i| i.w).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_values_rejected() {
        assert!(UtilitySheet::new(0, vec![item(11.0, 1.0, 0.5)]).is_err());
        assert!(UtilitySheet::new(0, vec![item(5.0, 1.0, 1.5)]).is_err());
        assert!(UtilitySheet::new(0, vec![]).is_err());
    }

    #[test]
    fn fresh_state_advances_through_fixed_phases() {
        let mut state = WorkflowState::new(0);
        assert_eq!(state.phase, Phase::ResourceAssessment);
        state = advance(&state, &Action::speak("a"), None).unwrap();
        assert_eq!(state.phase, Phase::ResourceAssessment);
        assert_eq!(state.pending_agent, 1);
        state = advance(&state, &Action::speak("b"), None).unwrap();
        assert_eq!(state.phase, Phase::AssessDifference);
        assert_eq!(state.pending_agent, 0);
    }

    #[test]
    fn revise_confirm_confirm_completes() {
        let mut state = WorkflowState::new(0);
        state.phase = Phase::UpdateProposal;
        state = advance(&state, &Action::speak("a"), Some(UpdateOption::Revise)).unwrap();
        assert_eq!(state.confirm_streak, 0);
        state = advance(&state, &Action::speak("b"), Some(UpdateOption::Confirm)).unwrap();
        assert_eq!(state.confirm_streak, 1);
        state = advance(&state, &Action::speak("c"), Some(UpdateOption::Confirm)).unwrap();
        assert_eq!(state.phase, Phase::Complete);
    }

    #[test]
    fn present_resets_the_streak() {
        let mut state = WorkflowState::new(0);
        state.phase = Phase::UpdateProposal;
        state = advance(&state, &Action::speak("a"), Some(UpdateOption::Confirm)).unwrap();
        state = advance(&state, &Action::speak("b"), Some(UpdateOption::Present)).unwrap();
        assert_eq!(state.confirm_streak, 0);
        assert_ne!(state.phase, Phase::Complete);
    }

    #[test]
    fn complete_state_rejects_emissions() {
        let mut state = WorkflowState::new(0);
        state.phase = Phase::Complete;
        assert!(advance(&state, &Action::speak("x"), None).is_err());
    }

    #[test]
    fn option_outside_update_proposal_is_out_of_turn() {
        let state = WorkflowState::new(0);
        assert!(advance(&state, &Action::speak("x"), Some(UpdateOption::Confirm)).is_err());
    }

    #[test]
    fn classify_update_confirm_bumps_version() {
        let prev = UtilitySheet::new(0, vec![item(5.0, 1.0, 0.5)]).unwrap();
        let reply = serde_json::json!({
            "option": "confirm_proposal",
            "utility": {"items": [{"name": "i", "description": "", "u": 5.0, "w": 1.0, "r": 0.5}]},
            "draft": "ok",
        });
        let (option, sheet) = classify_update(&reply, &prev).unwrap();
        assert_eq!(option, UpdateOption::Confirm);
        assert_eq!(sheet.version, 2);
        assert_eq!(sheet.items, prev.items);
    }

    #[test]
    fn classify_update_renormalizes_overweight_sheets() {
        let prev = UtilitySheet::new(1, vec![item(5.0, 1.0, 0.5)]).unwrap();
        let reply = serde_json::json!({
            "option": "revise_proposal",
            "utility": {"items": [
                {"name": "a", "description": "", "u": 5.0, "w": 1.0, "r": 0.5},
                {"name": "b", "description": "", "u": 5.0, "w": 1.0, "r": 0.5},
            ]},
        });
        let (_, sheet) = classify_update(&reply, &prev).unwrap();
        let total: f64 = sheet.items.iter().map(|i| i.w).sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert!((sheet.items[0].w - 0.5).abs() < 1e-6);
    }

    #[test]
    fn classify_update_without_option_fails() {
        let prev = UtilitySheet::new(0, vec![item(5.0, 1.0, 0.5)]).unwrap();
        let reply = serde_json::json!({"utility": {"items": []}});
        assert!(matches!(
            classify_update(&reply, &prev),
            Err(WorkflowError::MissingOptionField)
        ));
    }

    mod session {
        use super::*;
        use crate::dialogue::{DialogueRecord, Turn, TurnStrategy};
        use crate::gateway::{ChatSettings, Gateway, RetryPolicy, ScriptEntry, ScriptedChat};
        use crate::profile::{AgentProfile, TaskProfile};
        use crate::prompts::PromptSet;
        use std::sync::Arc;

        fn task() -> TaskProfile {
            TaskProfile {
                task_id: "t".into(),
                scenario: "Charity event.".into(),
                agents: [
                    AgentProfile {
                        name: "Hendrick Heinz".into(),
                        background: "chef".into(),
                        personality: "impulsive".into(),
                        secrets: "s1".into(),
                        goal: "raise donation".into(),
                    },
                    AgentProfile {
                        name: "Ethan Smith".into(),
                        background: "dev".into(),
                        personality: "reserved".into(),
                        secrets: "s2".into(),
                        goal: "hold budget".into(),
                    },
                ],
                hard_flag: false,
            }
        }

        fn record() -> DialogueRecord {
            DialogueRecord {
                task: task(),
                starter_index: 0,
                turns: vec![Turn {
                    index: 0,
                    agent_index: 0,
                    action: Action::speak("opening"),
                    strategy: TurnStrategy::Init,
                    rating: None,
                }],
                nsi_used: true,
                final_goal_c: None,
                attempt_number: 1,
            }
        }

        fn items_json() -> String {
            serde_json::json!({
                "items": [
                    {"name": "a", "description": "", "u": 8.0, "w": 0.5, "r": 0.4},
                    {"name": "b", "description": "", "u": 6.0, "w": 0.5, "r": 0.6},
                ]
            })
            .to_string()
        }

        fn update_json(option: &str, draft: &str) -> String {
            serde_json::json!({
                "option": option,
                "utility": {"items": [
                    {"name": "a", "description": "", "u": 8.0, "w": 0.5, "r": 0.7},
                    {"name": "b", "description": "", "u": 6.0, "w": 0.5, "r": 0.7},
                ]},
                "draft": draft,
            })
            .to_string()
        }

        fn scripted(entries: Vec<ScriptEntry>) -> (Arc<ScriptedChat>, Gateway, ChatSettings) {
            let backend = Arc::new(ScriptedChat::new(entries));
            let gateway = Gateway::new(
                "expert",
                backend.clone(),
                1,
                RetryPolicy { max_retries: 0, backoff_ms: vec![0] },
                None,
            );
            let settings = ChatSettings {
                model_id: "expert".into(),
                temperature: 1.0,
                top_p: 0.95,
                max_tokens: 8192,
            };
            (backend, gateway, settings)
        }

        fn entry(response: &str) -> ScriptEntry {
            ScriptEntry { match_key: None, response: response.into() }
        }

        #[test]
        fn resource_assessment_runs_the_three_stage_chain() {
            let (backend, gateway, settings) = scripted(vec![
                entry(&items_json()),
                entry("plain interests draft"),
                ScriptEntry {
                    match_key: Some("Rewrite the draft".into()),
                    response: "styled utterance".into(),
                },
            ]);
            let prompts = PromptSet::default();
            let ctx = WorkflowCtx {
                gateway: &gateway,
                settings: &settings,
                prompts: &prompts,
                log: None,
                schema_retries: 0,
            };
            let mut session = WorkflowSession::new(0);
            let (action, completed) = session.next_emission(&ctx, &task(), &record()).unwrap();
            assert_eq!(action, Action::speak("styled utterance"));
            assert!(!completed);
            // exactly one structured call, one draft call, one transfer call
            assert_eq!(backend.calls(), 3);
            let sheet = session.state.own_sheets[0].as_ref().unwrap();
            assert_eq!(sheet.version, 1);
            assert_eq!(session.state.pending_agent, 1);
        }

        #[test]
        fn completing_confirm_skips_style_transfer() {
            let (backend, gateway, settings) = scripted(vec![entry(&update_json(
                "confirm_proposal",
                "closing confirmation text",
            ))]);
            let prompts = PromptSet::default();
            let ctx = WorkflowCtx {
                gateway: &gateway,
                settings: &settings,
                prompts: &prompts,
                log: None,
                schema_retries: 0,
            };
            let mut session = WorkflowSession::new(0);
            session.state.phase = Phase::UpdateProposal;
            session.state.confirm_streak = 1;
            session.state.own_sheets[0] =
                Some(UtilitySheet::new(0, vec![item(5.0, 1.0, 0.5)]).unwrap());
            let (action, completed) = session.next_emission(&ctx, &task(), &record()).unwrap();
            assert!(completed);
            assert_eq!(action.argument, "closing confirmation text");
            assert_eq!(backend.calls(), 1, "no style-transfer pass on the hand-back confirm");
            assert_eq!(session.state.own_sheets[0].as_ref().unwrap().version, 2);
        }

        #[test]
        fn non_completing_update_styles_the_draft() {
            let (backend, gateway, settings) = scripted(vec![
                entry(&update_json("revise_proposal", "revised draft")),
                entry("styled revision"),
            ]);
            let prompts = PromptSet::default();
            let ctx = WorkflowCtx {
                gateway: &gateway,
                settings: &settings,
                prompts: &prompts,
                log: None,
                schema_retries: 0,
            };
            let mut session = WorkflowSession::new(1);
            session.state.phase = Phase::UpdateProposal;
            session.state.own_sheets[1] =
                Some(UtilitySheet::new(1, vec![item(5.0, 1.0, 0.5)]).unwrap());
            let (action, completed) = session.next_emission(&ctx, &task(), &record()).unwrap();
            assert!(!completed);
            assert_eq!(action.argument, "styled revision");
            assert_eq!(backend.calls(), 2);
            assert_eq!(session.state.confirm_streak, 0);
        }

        #[test]
        fn full_session_tracks_versions_per_step4_emission() {
            // R R D D I I U(confirm) U(confirm, completes)
            let entries = vec![
                entry(&items_json()),
                entry("draft"),
                entry("styled r0"),
                entry(&items_json()),
                entry("draft"),
                entry("styled r1"),
                entry(&items_json()),
                entry("draft"),
                entry("styled d0"),
                entry(&items_json()),
                entry("draft"),
                entry("styled d1"),
                entry("proposal draft"),
                entry("styled i0"),
                entry("proposal draft"),
                entry("styled i1"),
                entry(&update_json("confirm_proposal", "u0 draft")),
                entry("styled u0"),
                entry(&update_json("confirm_proposal", "closing")),
            ];
            let (backend, gateway, settings) = scripted(entries);
            let prompts = PromptSet::default();
            let ctx = WorkflowCtx {
                gateway: &gateway,
                settings: &settings,
                prompts: &prompts,
                log: None,
                schema_retries: 0,
            };
            let mut session = WorkflowSession::new(0);
            let mut emissions = 0;
            loop {
                let (_, completed) = session.next_emission(&ctx, &task(), &record()).unwrap();
                emissions += 1;
                if completed {
                    break;
                }
            }
            assert_eq!(emissions, 8);
            assert_eq!(backend.calls(), 19);
            // one Step-4 emission per agent: versions are 1 + 1
            assert_eq!(session.state.own_sheets[0].as_ref().unwrap().version, 2);
            assert_eq!(session.state.own_sheets[1].as_ref().unwrap().version, 2);
            assert_eq!(session.state.guessed_sheets[0].as_ref().unwrap().version, 1);
            assert!(session.is_complete());
        }
    }

    proptest! {
        /// Linearity in each r (and u) holding others fixed, and invariance
        /// under uniform weight scaling followed by renormalization.
        #[test]
        fn utility_value_linearity_and_scale_invariance(
            us in proptest::collection::vec(0.0f64..10.0, 1..6),
            ws in proptest::collection::vec(0.01f64..1.0, 1..6),
            rs in proptest::collection::vec(0.0f64..1.0, 1..6),
            scale in 0.1f64..10.0,
            lambda in 0.0f64..1.0,
        ) {
            let n = us.len().min(ws.len()).min(rs.len());
            let items: Vec<UtilityItem> =
                (0..n).map(|i| item(us[i], ws[i], rs[i])).collect();
            let sheet = UtilitySheet::new(0, items.clone()).unwrap();

            // scaling all weights by c > 0 then renormalizing is a no-op
            let scaled: Vec<UtilityItem> = items
                .iter()
                .map(|i| item(i.u, i.w * scale, i.r))
                .collect();
            let scaled_sheet = UtilitySheet::new(0, scaled).unwrap();
            prop_assert!((utility_value(&sheet) - utility_value(&scaled_sheet)).abs() < 1e-9);

            // linear interpolation of r0 interpolates the value linearly
            let mut low = items.clone();
            low[0].r = 0.0;
            let mut high = items.clone();
            high[0].r = 1.0;
            let mut mid = items.clone();
            mid[0].r = lambda;
            let v_low = utility_value(&UtilitySheet::new(0, low).unwrap());
            let v_high = utility_value(&UtilitySheet::new(0, high).unwrap());
            let v_mid = utility_value(&UtilitySheet::new(0, mid).unwrap());
            prop_assert!((v_mid - (v_low + lambda * (v_high - v_low))).abs() < 1e-9);
        }

        /// Any option sequence that completes the workflow ends with two
        /// Confirms, and the phase trace is R R D D I I U+.
        #[test]
        fn completed_workflows_end_confirm_confirm(
            options in proptest::collection::vec(0u8..3, 2..30),
        ) {
            let mut state = WorkflowState::new(0);
            let mut trace = Vec::new();
            let mut given = Vec::new();
            for _ in 0..6 {
                trace.push(state.phase);
                state = advance(&state, &Action::speak("x"), None).unwrap();
            }
            for code in &options {
                if state.phase == Phase::Complete {
                    break;
                }
                let option = match code {
                    0 => UpdateOption::Present,
                    1 => UpdateOption::Revise,
                    _ => UpdateOption::Confirm,
                };
                trace.push(state.phase);
                given.push(option);
                state = advance(&state, &Action::speak("x"), Some(option)).unwrap();
            }
            prop_assert_eq!(&trace[0..2], &[Phase::ResourceAssessment; 2]);
            prop_assert_eq!(&trace[2..4], &[Phase::AssessDifference; 2]);
            prop_assert_eq!(&trace[4..6], &[Phase::InitialProposal; 2]);
            for phase in &trace[6..] {
                prop_assert_eq!(*phase, Phase::UpdateProposal);
            }
            if state.phase == Phase::Complete {
                let n = given.len();
                prop_assert!(n >= 2);
                prop_assert_eq!(given[n - 1], UpdateOption::Confirm);
                prop_assert_eq!(given[n - 2], UpdateOption::Confirm);
            }
        }
    }
}
