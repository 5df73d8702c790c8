//! Step rating: the expert's self-evaluation after each action.
//!
//! Each rating samples the expert several times (generation settings, so
//! samples differ), validates the five-step schema, and averages: step1/step2
//! become the per-agent current-goal pair, step3/step4 the predicted-goal
//! pair. The termination rule is strict — one flagged sample out of all of
//! them forces the next action to `leave`.

use crate::dialogue::{render_transcript, DialogueRecord};
use crate::gateway::{extract_object, ChatSettings, Gateway, GatewayError};
use crate::profile::TaskProfile;
use crate::prompts::{context_block, render_template, PromptSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One step field: free-text analysis plus an integer score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepField {
    pub analysis: String,
    pub score: u8,
}

/// One validated rating sample. Steps 1-4 are goal scores in [0, 10];
/// step 5 is the continuation flag, 0 meaning the dialogue should end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRatingSample {
    pub step1: StepField,
    pub step2: StepField,
    pub step3: StepField,
    pub step4: StepField,
    pub step5: StepField,
}

/// Aggregated step rating. Pairs are indexed by task agent order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRating {
    pub goal_c: [f64; 2],
    pub goal_p: [f64; 2],
    pub terminate: bool,
    pub samples: Vec<RawRatingSample>,
}

impl StepRating {
    /// Aggregates validated samples: arithmetic means for the goal pairs,
    /// OR over the per-sample termination flags.
    pub fn aggregate(samples: Vec<RawRatingSample>) -> Self {
        let n = samples.len().max(1) as f64;
        let mean = |pick: fn(&RawRatingSample) -> u8| {
            samples.iter().map(|s| f64::from(pick(s))).sum::<f64>() / n
        };
        StepRating {
            goal_c: [mean(|s| s.step1.score), mean(|s| s.step2.score)],
            goal_p: [mean(|s| s.step3.score), mean(|s| s.step4.score)],
            terminate: samples.iter().any(|s| s.step5.score == 0),
            samples,
        }
    }

    /// The scalar fed to strategy routing: the mean over the two agents.
    /// Per-agent values stay recorded for analysis.
    pub fn goal_c_scalar(&self) -> f64 {
        (self.goal_c[0] + self.goal_c[1]) / 2.0
    }

    pub fn goal_p_scalar(&self) -> f64 {
        (self.goal_p[0] + self.goal_p[1]) / 2.0
    }
}

#[derive(Debug, Error)]
pub enum RatingError {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("rating requires at least one turn")]
    EmptyDialogue,
    #[error("rating sample failed schema validation after retries: {0}")]
    JudgeSchemaError(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Renders the step-rating prompt with both agent names, the omniscient
/// context intro, and the rendered dialogue so far.
pub fn build_rating_prompt(
    prompts: &PromptSet,
    task: &TaskProfile,
    record: &DialogueRecord,
) -> Result<String, RatingError> {
    if task.agents.iter().any(|a| a.name.trim().is_empty()) {
        return Err(RatingError::InvalidProfile("agent name is empty".into()));
    }
    if record.turns.is_empty() {
        return Err(RatingError::EmptyDialogue);
    }
    let dialog = render_transcript(record, record.turns.len());
    Ok(render_template(
        &prompts.step_rating,
        &[
            ("agent1_name", &task.agent(0).name),
            ("agent2_name", &task.agent(1).name),
            ("complete_intro", &context_block(task, None)),
            ("dialog", dialog.trim_end()),
        ],
    ))
}

/// Scores as integers or numeric strings are both accepted; the shipped
/// template prints the score placeholder as a string.
fn score_from(value: &serde_json::Value) -> Option<i64> {
    match value {
        serde_json::Value::Number(n) => n.as_i64(),
        serde_json::Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn field_from(value: &serde_json::Value, key: &str, max: u8) -> Result<StepField, String> {
    let step = value
        .get(key)
        .ok_or_else(|| format!("missing {key}"))?;
    let score = score_from(&step["score"]).ok_or_else(|| format!("{key} score not an integer"))?;
    if score < 0 || score > i64::from(max) {
        return Err(format!("{key} score {score} outside [0, {max}]"));
    }
    let analysis = step["analysis"].as_str().unwrap_or_default().to_string();
    Ok(StepField { analysis, score: score as u8 })
}

/// Validates one raw judge reply against the five-step schema.
pub fn parse_rating_sample(value: &serde_json::Value) -> Result<RawRatingSample, String> {
    Ok(RawRatingSample {
        step1: field_from(value, "step1", 10)?,
        step2: field_from(value, "step2", 10)?,
        step3: field_from(value, "step3", 10)?,
        step4: field_from(value, "step4", 10)?,
        step5: field_from(value, "step5", 1)?,
    })
}

/// The step rater: one expert gateway plus its generation settings.
pub struct StepRater<'a> {
    pub gateway: &'a Gateway,
    pub settings: &'a ChatSettings,
    pub prompts: &'a PromptSet,
    /// Re-requests per malformed sample before giving up.
    pub schema_retries: u32,
}

impl<'a> StepRater<'a> {
    pub fn new(gateway: &'a Gateway, settings: &'a ChatSettings, prompts: &'a PromptSet) -> Self {
        Self { gateway, settings, prompts, schema_retries: 3 }
    }

    /// Issues `samples` independent rating calls and aggregates them.
    /// Malformed samples are re-requested, never silently dropped.
    pub fn rate_step(
        &self,
        task: &TaskProfile,
        record: &DialogueRecord,
        samples: usize,
    ) -> Result<StepRating, RatingError> {
        assert!(samples >= 1, "sample count must be positive");
        let prompt = build_rating_prompt(self.prompts, task, record)?;
        let request = self.settings.request("", prompt);
        let mut validated = Vec::with_capacity(samples);
        for _ in 0..samples {
            let mut last_err = String::new();
            let mut ok = None;
            for _ in 0..=self.schema_retries {
                let reply = self.gateway.chat(&request)?;
                match extract_object(&reply).map_err(|e| e.to_string()).and_then(|v| parse_rating_sample(&v)) {
                    Ok(sample) => {
                        ok = Some(sample);
                        break;
                    }
                    Err(err) => last_err = err,
                }
            }
            match ok {
                Some(sample) => validated.push(sample),
                None => return Err(RatingError::JudgeSchemaError(last_err)),
            }
        }
        Ok(StepRating::aggregate(validated))
    }
}
