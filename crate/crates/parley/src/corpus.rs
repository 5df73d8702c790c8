//! Dialogue filtering, attempt management, SFT export, and corpus stats.
//!
//! Filtering reads the final goal score (two-agent mean of the last step
//! rating): dialogues that used the negotiation workflow keep at a lower
//! bar than plain ones. A task gets a bounded number of attempts; when
//! none passes, the best-scoring attempt enters the corpus anyway.

use crate::dialogue::DialogueRecord;
use crate::engine::EngineError;
use crate::prompts::{build_agent_prompt, PromptSet};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Keep/regenerate boundaries and the attempt budget
/// (1 initial generation + the regenerations).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterThresholds {
    pub nsi_keep: f64,
    pub plain_keep: f64,
    pub max_attempts: usize,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self { nsi_keep: 8.0, plain_keep: 8.5, max_attempts: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterDecision {
    Keep,
    Regenerate,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("record has no final step rating to filter on")]
    MissingFinalRating,
    #[error("task {task_id}: all {attempts} attempts aborted; last error: {last_error}")]
    TaskFailed { task_id: String, attempts: usize, last_error: String },
}

/// Applies the regeneration rule to a finished record.
pub fn filter_decision(
    record: &DialogueRecord,
    t: &FilterThresholds,
) -> Result<FilterDecision, CorpusError> {
    let goal_c = record.final_goal_scalar().ok_or(CorpusError::MissingFinalRating)?;
    let threshold = if record.nsi_used { t.nsi_keep } else { t.plain_keep };
    if goal_c < threshold {
        Ok(FilterDecision::Regenerate)
    } else {
        Ok(FilterDecision::Keep)
    }
}

/// Runs attempts until one keeps or the budget is spent; with no keeper,
/// returns the attempt with the highest final goal score (ties go to the
/// earliest attempt). Attempts aborted by provider errors consume budget;
/// a task fails only when every attempt aborted.
pub fn generate_with_retries<F>(
    task_id: &str,
    t: &FilterThresholds,
    mut run_attempt: F,
) -> Result<(DialogueRecord, usize), CorpusError>
where
    F: FnMut(usize) -> Result<DialogueRecord, EngineError>,
{
    let mut best: Option<(f64, DialogueRecord)> = None;
    let mut last_error = String::from("no attempts ran");
    let mut attempts_used = 0;
    for attempt in 1..=t.max_attempts.max(1) {
        attempts_used = attempt;
        let record = match run_attempt(attempt) {
            Ok(record) => record,
            Err(err) => {
                last_error = err.to_string();
                continue;
            }
        };
        let score = record.final_goal_scalar().unwrap_or(f64::NEG_INFINITY);
        let keep = matches!(filter_decision(&record, t), Ok(FilterDecision::Keep));
        if keep {
            return Ok((record, attempts_used));
        }
        if best.as_ref().map(|(s, _)| score > *s).unwrap_or(true) {
            best = Some((score, record));
        }
    }
    match best {
        Some((_, record)) => Ok((record, attempts_used)),
        None => Err(CorpusError::TaskFailed {
            task_id: task_id.to_string(),
            attempts: attempts_used,
            last_error,
        }),
    }
}

/// One instruction-tuning pair: the full acting prompt for a turn and the
/// serialized action the agent produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftExample {
    pub task_id: String,
    pub turn_index: usize,
    pub agent_index: usize,
    pub input: String,
    pub output: String,
}

/// Exports one example per turn of a kept record.
pub fn export_sft(prompts: &PromptSet, record: &DialogueRecord) -> Vec<SftExample> {
    record
        .turns
        .iter()
        .map(|turn| SftExample {
            task_id: record.task.task_id.clone(),
            turn_index: turn.index,
            agent_index: turn.agent_index,
            input: build_agent_prompt(prompts, &record.task, record, turn.index, turn.agent_index),
            output: turn.action.serialize(),
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnGoalPoint {
    pub turn: usize,
    pub mean_goal_c: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusStats {
    pub dialogue_count: usize,
    pub sft_example_count: usize,
    pub total_attempts: usize,
    pub usable_ratio: f64,
    pub strategy_histogram: BTreeMap<String, usize>,
    pub mean_turns: f64,
    pub per_turn_goal_means: Vec<TurnGoalPoint>,
}

/// Corpus-level statistics over the kept records.
/// `all_attempts` counts every generation attempt, kept or not.
pub fn corpus_stats(kept: &[DialogueRecord], all_attempts: usize) -> CorpusStats {
    let dialogue_count = kept.len();
    let sft_example_count = kept.iter().map(|r| r.turns.len()).sum();
    let mut strategy_histogram: BTreeMap<String, usize> = BTreeMap::new();
    let mut per_turn: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for record in kept {
        for turn in &record.turns {
            *strategy_histogram.entry(turn.strategy.tag().to_string()).or_insert(0) += 1;
            if let Some(rating) = &turn.rating {
                let entry = per_turn.entry(turn.index).or_insert((0.0, 0));
                entry.0 += rating.goal_c_scalar();
                entry.1 += 1;
            }
        }
    }
    let mean_turns = if dialogue_count == 0 {
        0.0
    } else {
        sft_example_count as f64 / dialogue_count as f64
    };
    let usable_ratio = if all_attempts == 0 {
        0.0
    } else {
        dialogue_count as f64 / all_attempts as f64
    };
    CorpusStats {
        dialogue_count,
        sft_example_count,
        total_attempts: all_attempts,
        usable_ratio,
        strategy_histogram,
        mean_turns,
        per_turn_goal_means: per_turn
            .into_iter()
            .map(|(turn, (sum, count))| TurnGoalPoint {
                turn,
                mean_goal_c: sum / count as f64,
                count,
            })
            .collect(),
    }
}
