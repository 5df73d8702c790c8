//! The dialogue loop: initialization turns, per-turn step rating, threshold
//! routing among the three strategies, workflow handoff, and leave handling.
//!
//! Timing follows the rating-gates-next-action rule: the rating taken after
//! action `k` decides the strategy for action `k + 1`. Selecting the
//! negotiation strategy hands generation to the workflow and suspends
//! rating until it completes; the emission that completes the workflow is
//! the hand-back turn, recorded under the native label and rated again.

use crate::action::{parse_action, Action, ParseError};
use crate::dialogue::{DialogueRecord, Turn, TurnStrategy};
use crate::gateway::{ChatEndpoint, GatewayError, WireLog};
use crate::negotiation::{WorkflowCtx, WorkflowError, WorkflowSession};
use crate::profile::TaskProfile;
use crate::prompts::{build_agent_prompt, PromptSet};
use crate::rater::{RatingError, StepRater};
use crate::strategy::{compose_prompt, select_strategy, EngineConfig, Strategy, StrategyError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Rating(#[from] RatingError),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error("model output stayed malformed after retries: {0}")]
    MalformedAction(ParseError),
}

/// Provider handles for one dialogue run. `agents` holds the generation
/// endpoint per side (both the same in self-play); the rater always uses
/// the expert endpoint.
pub struct EngineHandles<'a> {
    pub agents: [&'a ChatEndpoint; 2],
    pub expert: &'a ChatEndpoint,
    pub prompts: &'a PromptSet,
    pub log: Option<&'a WireLog>,
}

pub struct DialogueEngine<'a> {
    pub handles: EngineHandles<'a>,
    pub cfg: &'a EngineConfig,
    /// Regenerations of a single malformed model reply before the attempt fails.
    pub parse_retries: u32,
}

impl<'a> DialogueEngine<'a> {
    pub fn new(handles: EngineHandles<'a>, cfg: &'a EngineConfig) -> Self {
        Self { handles, cfg, parse_retries: 3 }
    }

    /// Runs one complete dialogue attempt for `task`.
    pub fn run_dialogue(
        &self,
        task: &TaskProfile,
        starter_index: usize,
        attempt_number: usize,
    ) -> Result<DialogueRecord, EngineError> {
        let cfg = self.cfg;
        let mut record = DialogueRecord {
            task: task.clone(),
            starter_index,
            turns: Vec::new(),
            nsi_used: false,
            final_goal_c: None,
            attempt_number,
        };
        let rater = StepRater::new(
            &self.handles.expert.gateway,
            &self.handles.expert.settings,
            self.handles.prompts,
        );
        let mut routed: Option<Strategy> = None;
        let mut workflow: Option<WorkflowSession> = None;
        let mut force_leave = false;

        for i in 0..cfg.max_turns {
            let agent = (starter_index + i) % 2;
            let prev_left = record.turns.last().map(|t| t.action.is_leave()).unwrap_or(false);

            let (action, label) = if prev_left || force_leave {
                force_leave = false;
                (Action::leave(), TurnStrategy::Nsc)
            } else if let Some(session) = workflow.as_mut() {
                let ctx = WorkflowCtx {
                    gateway: &self.handles.agents[agent].gateway,
                    settings: &self.handles.agents[agent].settings,
                    prompts: self.handles.prompts,
                    log: self.handles.log,
                    schema_retries: self.parse_retries,
                };
                let (action, completed) = session.next_emission(&ctx, task, &record)?;
                if completed {
                    workflow = None;
                    routed = None;
                    (action, TurnStrategy::Nsc)
                } else {
                    (action, TurnStrategy::Nsi)
                }
            } else if let Some(strategy) = routed {
                let action = self.native_action(task, &record, i, agent, strategy)?;
                (action, strategy.into())
            } else if i < cfg.init_turns {
                let action = self.native_action(task, &record, i, agent, Strategy::Nsc)?;
                (action, TurnStrategy::Init)
            } else {
                // post-init turns before the first rating fall back to native
                let action = self.native_action(task, &record, i, agent, Strategy::Nsc)?;
                (action, TurnStrategy::Nsc)
            };

            record.turns.push(Turn { index: i, agent_index: agent, action, strategy: label, rating: None });

            let just_left = record.turns.last().unwrap().action.is_leave();
            if just_left && prev_left {
                break; // mutual leave ends the episode
            }
            if just_left {
                continue; // partner gets the one reciprocal closing turn
            }

            let rating_due = i + 1 >= cfg.rate_from_turn && i + 1 < cfg.max_turns;
            if rating_due && workflow.is_none() {
                let rating = rater.rate_step(task, &record, cfg.sample_count)?;
                record.final_goal_c = Some(rating.goal_c);
                let scalars = (rating.goal_c_scalar(), rating.goal_p_scalar());
                let terminate = rating.terminate;
                record.turns.last_mut().unwrap().rating = Some(rating);
                if terminate {
                    force_leave = true;
                    routed = None;
                } else {
                    let strategy = select_strategy(scalars.0, scalars.1, &cfg.thresholds);
                    if strategy == Strategy::Nsi {
                        workflow = Some(WorkflowSession::new((starter_index + i + 1) % 2));
                        record.nsi_used = true;
                        routed = None;
                    } else {
                        routed = Some(strategy);
                    }
                }
            }
        }
        Ok(record)
    }

    /// One native (or SSI-augmented) generation with parse regenerations.
    fn native_action(
        &self,
        task: &TaskProfile,
        record: &DialogueRecord,
        turn_index: usize,
        agent: usize,
        strategy: Strategy,
    ) -> Result<Action, EngineError> {
        let base = build_agent_prompt(self.handles.prompts, task, record, turn_index, agent);
        let prompt = compose_prompt(strategy, &base, &self.handles.prompts.ssi_footnote)?;
        let endpoint = self.handles.agents[agent];
        let request = endpoint.settings.request("", prompt);
        let mut last = ParseError::NoObjectFound;
        for _ in 0..=self.parse_retries {
            let reply = endpoint.gateway.chat(&request)?;
            match parse_action(&reply) {
                Ok(action) => return Ok(action),
                Err(err) => last = err,
            }
        }
        Err(EngineError::MalformedAction(last))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ChatSettings, Gateway, RetryPolicy, ScriptedChat};
    use crate::profile::AgentProfile;
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

    fn speak_json(text: &str) -> String {
        serde_json::json!({"action_type": "speak", "argument": text}).to_string()
    }

    fn rating_json(c1: u8, c2: u8, p1: u8, p2: u8, cont: u8) -> String {
        serde_json::json!({
            "step1": {"analysis": "", "score": c1},
            "step2": {"analysis": "", "score": c2},
            "step3": {"analysis": "", "score": p1},
            "step4": {"analysis": "", "score": p2},
            "step5": {"analysis": "", "score": cont},
        })
        .to_string()
    }

    fn endpoint(responses: Vec<String>) -> ChatEndpoint {
        let refs: Vec<&str> = responses.iter().map(String::as_str).collect();
        let backend = Arc::new(ScriptedChat::from_responses(&refs));
        let gateway = Arc::new(Gateway::new(
            "expert",
            backend,
            1,
            RetryPolicy { max_retries: 0, backoff_ms: vec![0] },
            None,
        ));
        let settings = ChatSettings {
            model_id: "expert".into(),
            temperature: 1.0,
            top_p: 0.95,
            max_tokens: 8192,
        };
        ChatEndpoint::new(gateway, settings)
    }

    fn run(responses: Vec<String>, cfg: &EngineConfig) -> Result<DialogueRecord, EngineError> {
        let prompts = PromptSet::default();
        let ep = endpoint(responses);
        let handles =
            EngineHandles { agents: [&ep, &ep], expert: &ep, prompts: &prompts, log: None };
        DialogueEngine::new(handles, cfg).run_dialogue(&task(), 0, 1)
    }

    #[test]
    fn init_equal_to_max_means_no_ratings() {
        let cfg = EngineConfig { max_turns: 6, init_turns: 6, rate_from_turn: 6, ..Default::default() };
        let responses: Vec<String> = (0..6).map(|i| speak_json(&format!("turn {i}"))).collect();
        let record = run(responses, &cfg).unwrap();
        assert_eq!(record.turns.len(), 6);
        assert!(record.turns.iter().all(|t| t.rating.is_none()));
        assert!(record.turns.iter().all(|t| t.strategy == TurnStrategy::Init));
        assert!(record.final_goal_c.is_none());
    }

    #[test]
    fn terminate_at_first_rating_forces_leave_pair() {
        let cfg = EngineConfig { max_turns: 20, init_turns: 6, rate_from_turn: 6, sample_count: 5, ..Default::default() };
        let mut responses: Vec<String> = (0..6).map(|i| speak_json(&format!("turn {i}"))).collect();
        for _ in 0..5 {
            responses.push(rating_json(8, 8, 8, 8, 0));
        }
        let record = run(responses, &cfg).unwrap();
        assert_eq!(record.turns.len(), cfg.rate_from_turn + 2);
        assert!(record.turns[6].action.is_leave());
        assert!(record.turns[7].action.is_leave());
        assert_eq!(record.turns[6].strategy, TurnStrategy::Nsc);
        assert_eq!(record.final_goal_c, Some([8.0, 8.0]));
    }

    #[test]
    fn agents_strictly_alternate() {
        let cfg = EngineConfig { max_turns: 6, init_turns: 6, rate_from_turn: 6, ..Default::default() };
        let responses: Vec<String> = (0..6).map(|i| speak_json(&format!("t{i}"))).collect();
        let record = run(responses, &cfg).unwrap();
        for pair in record.turns.windows(2) {
            assert_ne!(pair[0].agent_index, pair[1].agent_index);
        }
    }

    #[test]
    fn natural_leave_gets_one_reciprocal_turn() {
        let cfg = EngineConfig { max_turns: 6, init_turns: 6, rate_from_turn: 6, ..Default::default() };
        let responses = vec![
            speak_json("hello"),
            serde_json::json!({"action_type": "leave", "argument": ""}).to_string(),
        ];
        let record = run(responses, &cfg).unwrap();
        assert_eq!(record.turns.len(), 3);
        assert!(record.turns[1].action.is_leave());
        assert!(record.turns[2].action.is_leave());
    }

    #[test]
    fn ssi_routing_appends_footnote_to_next_prompt() {
        // rating (8,8) -> SSI; the scripted entry for turn 6 requires the
        // footnote marker in the request, so a mismatch would fail loudly.
        let cfg = EngineConfig { max_turns: 8, init_turns: 6, rate_from_turn: 6, sample_count: 1, ..Default::default() };
        let mut entries: Vec<crate::gateway::ScriptEntry> = (0..6)
            .map(|i| crate::gateway::ScriptEntry { match_key: None, response: speak_json(&format!("t{i}")) })
            .collect();
        entries.push(crate::gateway::ScriptEntry {
            match_key: None,
            response: rating_json(8, 8, 8, 8, 1),
        });
        entries.push(crate::gateway::ScriptEntry {
            match_key: Some("Implicitly express the \"conflict\"".into()),
            response: speak_json("ssi turn"),
        });
        entries.push(crate::gateway::ScriptEntry {
            match_key: None,
            response: rating_json(9, 9, 9, 9, 1),
        });
        entries.push(crate::gateway::ScriptEntry {
            match_key: None,
            response: speak_json("nsc closing"),
        });
        let backend = Arc::new(ScriptedChat::new(entries));
        let gateway = Arc::new(Gateway::new(
            "expert",
            backend,
            1,
            RetryPolicy { max_retries: 0, backoff_ms: vec![0] },
            None,
        ));
        let ep = ChatEndpoint::new(
            gateway,
            ChatSettings { model_id: "m".into(), temperature: 1.0, top_p: 0.95, max_tokens: 8192 },
        );
        let prompts = PromptSet::default();
        let handles = EngineHandles { agents: [&ep, &ep], expert: &ep, prompts: &prompts, log: None };
        let record = DialogueEngine::new(handles, &cfg).run_dialogue(&task(), 0, 1).unwrap();
        assert_eq!(record.turns[6].strategy, TurnStrategy::Ssi);
        assert_eq!(record.turns[7].strategy, TurnStrategy::Nsc);
        // every post-activation non-NSI turn up to the cap gate carries a rating
        assert!(record.turns[6].rating.is_some());
    }

    #[test]
    fn malformed_replies_are_regenerated_then_fail() {
        let cfg = EngineConfig { max_turns: 2, init_turns: 2, rate_from_turn: 2, ..Default::default() };
        let responses = vec!["not json".to_string(); 4];
        let err = run(responses, &cfg).unwrap_err();
        assert!(matches!(err, EngineError::MalformedAction(_)));
    }

    #[test]
    fn record_never_exceeds_max_turns() {
        let cfg = EngineConfig { max_turns: 4, init_turns: 4, rate_from_turn: 4, ..Default::default() };
        let responses: Vec<String> = (0..4).map(|i| speak_json(&format!("t{i}"))).collect();
        let record = run(responses, &cfg).unwrap();
        assert_eq!(record.turns.len(), 4);
    }

    #[test]
    fn cap_mid_workflow_finalizes_with_nsi_used() {
        // rating after turn #3 routes to NSI; the workflow only gets through
        // its R and D phases before the turn cap lands
        let cfg = EngineConfig {
            max_turns: 8,
            init_turns: 4,
            rate_from_turn: 4,
            sample_count: 1,
            ..Default::default()
        };
        let items = serde_json::json!({
            "items": [{"name": "a", "description": "", "u": 5.0, "w": 1.0, "r": 0.5}]
        })
        .to_string();
        let mut responses: Vec<String> = (0..4).map(|i| speak_json(&format!("t{i}"))).collect();
        responses.push(rating_json(5, 5, 5, 5, 1)); // (5.0, 5.0) -> NSI
        for turn in 0..4 {
            responses.push(items.clone()); // structured stage (own sheet or opponent guess)
            responses.push("plain draft".into());
            responses.push(format!("styled workflow turn {turn}"));
        }
        let record = run(responses, &cfg).unwrap();
        assert_eq!(record.turns.len(), 8);
        assert!(record.nsi_used);
        for i in 4..8 {
            assert_eq!(record.turns[i].strategy, TurnStrategy::Nsi, "turn {i}");
            assert!(record.turns[i].rating.is_none());
        }
        // the final rating before activation provides the filter score
        assert_eq!(record.final_goal_c, Some([5.0, 5.0]));
    }
}
