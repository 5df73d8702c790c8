//! Social instruction following metrics.
//!
//! Diversity: embed each of one agent's actions (prefix-stripped), take
//! pairwise cosine similarities, and score
//! `(mean over pairs of (1 - sim^alpha))^alpha` — high-similarity dialogues
//! are crushed toward zero while the outer power spreads the top of the
//! range. Relevance: a judge scores each action against the agent's goal on
//! a five-point scale; the mean goes through a sigmoid.

use crate::dialogue::{action_content, DialogueRecord, Turn};
use crate::gateway::{cosine, ChatEndpoint, EmbedGateway, GatewayError};
use crate::profile::TaskProfile;
use crate::prompts::{render_template, PromptSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RELEVANCE_SCALE: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];

#[derive(Debug, Error)]
pub enum SifError {
    #[error("diversity needs at least two actions, got {0}")]
    InsufficientActions(usize),
    #[error("relevance judge failed schema validation after retries: {0}")]
    JudgeSchemaError(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Pairwise cosine similarities of one agent's actions. Values are raw
/// cosines in [-1, 1]; clamping to [0, 1] happens inside [`s_div`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn from_values(values: Vec<Vec<f64>>) -> Self {
        Self { n: values.len(), values }
    }
}

/// Embeds the prefix-stripped content of each action and builds the cosine
/// similarity matrix.
pub fn similarity_matrix(
    actions: &[&Turn],
    speaker_name: &str,
    embed: &EmbedGateway,
) -> Result<SimilarityMatrix, SifError> {
    let n = actions.len();
    if n < 2 {
        return Err(SifError::InsufficientActions(n));
    }
    let contents: Vec<String> = actions.iter().map(|t| action_content(t, speaker_name)).collect();
    let vectors = embed.embed(&contents)?;
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        values[i][i] = 1.0;
        for j in i + 1..n {
            let sim = cosine(&vectors[i], &vectors[j]);
            values[i][j] = sim;
            values[j][i] = sim;
        }
    }
    Ok(SimilarityMatrix { n, values })
}

/// Inner-sum normalization. `PairMean` averages over the unordered
/// off-diagonal pairs, keeping the inner value in [0, 1]. `LiteralPaper`
/// divides the full off-diagonal sum by (n - 1), which exceeds 1 for n > 2;
/// it is exposed for comparison only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DivNormalization {
    PairMean,
    LiteralPaper,
}

/// Action diversity score in [0, 1] (under `PairMean`).
pub fn s_div(matrix: &SimilarityMatrix, alpha: u32) -> f64 {
    s_div_with(matrix, alpha, DivNormalization::PairMean)
}

pub fn s_div_with(matrix: &SimilarityMatrix, alpha: u32, norm: DivNormalization) -> f64 {
    let n = matrix.n;
    assert!(n >= 2, "s_div needs at least two actions");
    assert!(alpha >= 1, "alpha must be positive");
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            // negative cosines clamp to zero so an even power cannot turn
            // anti-similar text into high similarity
            let sim = matrix.values[i][j].clamp(0.0, 1.0);
            sum += 1.0 - sim.powi(alpha as i32);
            pairs += 1;
        }
    }
    let inner = match norm {
        DivNormalization::PairMean => sum / pairs as f64,
        DivNormalization::LiteralPaper => sum / (n - 1) as f64,
    };
    inner.powi(alpha as i32)
}

/// Per-action goal-relevance scores on the five-point scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelevanceScores {
    pub per_action: Vec<f64>,
    pub justifications: Vec<String>,
}

fn parse_relevance(value: &serde_json::Value) -> Result<(f64, String), String> {
    let score = match value.get("score") {
        Some(serde_json::Value::Number(n)) => n.as_f64(),
        Some(serde_json::Value::String(s)) => s.trim().parse().ok(),
        _ => None,
    }
    .ok_or("score missing or not numeric")?;
    if !RELEVANCE_SCALE.contains(&score) {
        return Err(format!("score {score} not in the five-point set"));
    }
    let justification = value["score_justification"].as_str().unwrap_or_default().to_string();
    Ok((score, justification))
}

/// Judges the goal relevance of each of one agent's actions, rendering the
/// relevance prompt with the goal, a recent-history window, and the current
/// utterance.
pub fn judge_relevance(
    task: &TaskProfile,
    record: &DialogueRecord,
    agent_index: usize,
    judge: &ChatEndpoint,
    prompts: &PromptSet,
    history_window: usize,
    schema_retries: u32,
) -> Result<RelevanceScores, SifError> {
    let name = &task.agent(agent_index).name;
    let goal = &task.agent(agent_index).goal;
    let mut per_action = Vec::new();
    let mut justifications = Vec::new();
    for turn in record.turns.iter().filter(|t| t.agent_index == agent_index) {
        let window_start = turn.index.saturating_sub(history_window);
        let history: String = record
            .turns
            .iter()
            .skip(window_start)
            .take(turn.index - window_start)
            .map(|t| {
                format!(
                    "Turn #{}\n{}\n\n",
                    t.index,
                    crate::dialogue::render_action(&task.agent(t.agent_index).name, &t.action)
                )
            })
            .collect();
        let history = if history.is_empty() { "(none)".to_string() } else { history };
        let utterance = crate::dialogue::render_action(name, &turn.action);
        let prompt = render_template(
            &prompts.relevance,
            &[
                ("agent_name", name.as_str()),
                ("goal", goal.as_str()),
                ("history", history.trim_end()),
                ("utterance", utterance.as_str()),
            ],
        );
        let mut last = String::from("no attempts made");
        let mut parsed = None;
        for _ in 0..=schema_retries {
            let value = judge.judge("", prompt.clone())?;
            match parse_relevance(&value) {
                Ok(pair) => {
                    parsed = Some(pair);
                    break;
                }
                Err(err) => last = err,
            }
        }
        let (score, justification) =
            parsed.ok_or(SifError::JudgeSchemaError(last))?;
        per_action.push(score);
        justifications.push(justification);
    }
    Ok(RelevanceScores { per_action, justifications })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Goal relevance score: sigmoid of the mean per-action score.
pub fn s_rel(scores: &RelevanceScores) -> f64 {
    assert!(!scores.per_action.is_empty(), "s_rel needs at least one score");
    let mean = scores.per_action.iter().sum::<f64>() / scores.per_action.len() as f64;
    sigmoid(mean)
}

/// Combined instruction-following score: the mean of the two components.
pub fn s_sif(div: f64, rel: f64) -> f64 {
    (div + rel) / 2.0
}

/// Per-agent and averaged scores for one evaluated corpus, on the [0, 1]
/// scale (reports multiply by 100).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SifReport {
    pub per_agent: [AgentSif; 2],
    pub avg_s_div: f64,
    pub avg_s_rel: f64,
    pub avg_s_sif: f64,
    pub mean_turns: f64,
    pub dialogues: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentSif {
    pub s_div: f64,
    pub s_rel: f64,
    pub s_sif: f64,
}

impl SifReport {
    /// Averages per-dialogue per-agent scores; dialogue `i` contributes
    /// agent slot `a` when both components exist there.
    pub fn from_scores(per_dialogue: &[[Option<AgentSif>; 2]], mean_turns: f64) -> Self {
        let mut agents = Vec::new();
        for slot in 0..2 {
            let scored: Vec<&AgentSif> =
                per_dialogue.iter().filter_map(|pair| pair[slot].as_ref()).collect();
            let count = scored.len().max(1) as f64;
            agents.push(AgentSif {
                s_div: scored.iter().map(|s| s.s_div).sum::<f64>() / count,
                s_rel: scored.iter().map(|s| s.s_rel).sum::<f64>() / count,
                s_sif: scored.iter().map(|s| s.s_sif).sum::<f64>() / count,
            });
        }
        let per_agent: [AgentSif; 2] = [agents.remove(0), agents.remove(0)];
        SifReport {
            avg_s_div: (per_agent[0].s_div + per_agent[1].s_div) / 2.0,
            avg_s_rel: (per_agent[0].s_rel + per_agent[1].s_rel) / 2.0,
            avg_s_sif: (per_agent[0].s_sif + per_agent[1].s_sif) / 2.0,
            per_agent,
            mean_turns,
            dialogues: per_dialogue.len(),
        }
    }
}
