//! Seven-dimension social-capability judging and the two benchmark modes.
//!
//! Episodes are judged at temperature 0, several passes, and the stored
//! scores are per-dimension means; the overall score is the plain mean of
//! the seven dimensions. Reference mode plays the agent under test against
//! a fixed weaker partner and scores only the agent under test; self-play
//! reports the mean of both sides.

use crate::dialogue::DialogueRecord;
use crate::engine::{DialogueEngine, EngineHandles};
use crate::gateway::{ChatEndpoint, GatewayError, WireLog};
use crate::profile::TaskProfile;
use crate::prompts::{context_block, render_template, PromptSet};
use crate::rater::build_rating_prompt;
use crate::strategy::EngineConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("judge reply failed schema validation after re-ask: {0}")]
    JudgeSchemaError(String),
    #[error("dimension {0} out of range after re-ask")]
    RangeViolation(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("episode generation failed: {0}")]
    Episode(String),
}

/// The seven SOTOPIA-EVAL-style dimensions with their printed ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimensionScores {
    pub bel: f64,
    pub rel: f64,
    pub kno: f64,
    pub sec: f64,
    pub soc: f64,
    pub fin: f64,
    pub goal: f64,
}

pub const DIMENSION_RANGES: [(&str, f64, f64); 7] = [
    ("believability", 0.0, 10.0),
    ("relationship", -5.0, 5.0),
    ("knowledge", 0.0, 10.0),
    ("secret", -10.0, 0.0),
    ("social_rules", -10.0, 0.0),
    ("financial_and_material_benefits", 0.0, 10.0),
    ("goal", 0.0, 10.0),
];

impl DimensionScores {
    pub fn as_array(&self) -> [f64; 7] {
        [self.bel, self.rel, self.kno, self.sec, self.soc, self.fin, self.goal]
    }

    /// The overall score: the arithmetic mean of the seven dimensions.
    pub fn overall(&self) -> f64 {
        self.as_array().iter().sum::<f64>() / 7.0
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        for ((name, low, high), value) in DIMENSION_RANGES.iter().zip(self.as_array()) {
            if !(*low..=*high).contains(&value) {
                return Err(EvalError::RangeViolation((*name).to_string()));
            }
        }
        Ok(())
    }

    fn mean_of(passes: &[DimensionScores]) -> DimensionScores {
        let n = passes.len().max(1) as f64;
        let sum = |pick: fn(&DimensionScores) -> f64| passes.iter().map(pick).sum::<f64>() / n;
        DimensionScores {
            bel: sum(|d| d.bel),
            rel: sum(|d| d.rel),
            kno: sum(|d| d.kno),
            sec: sum(|d| d.sec),
            soc: sum(|d| d.soc),
            fin: sum(|d| d.fin),
            goal: sum(|d| d.goal),
        }
    }
}

/// One judged episode: per-agent dimension means over the repeats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeEval {
    pub per_agent: [DimensionScores; 2],
    pub repeats: Vec<[DimensionScores; 2]>,
    pub overall: [f64; 2],
}

fn number_from(value: &serde_json::Value) -> Option<f64> {
    match value {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn parse_agent_dims(value: &serde_json::Value) -> Result<DimensionScores, String> {
    let score = |key: &str| -> Result<f64, String> {
        let slot = value.get(key).ok_or_else(|| format!("missing dimension {key}"))?;
        number_from(slot.get("score").unwrap_or(slot))
            .ok_or_else(|| format!("dimension {key} score not numeric"))
    };
    Ok(DimensionScores {
        bel: score("believability")?,
        rel: score("relationship")?,
        kno: score("knowledge")?,
        sec: score("secret")?,
        soc: score("social_rules")?,
        fin: score("financial_and_material_benefits")?,
        goal: score("goal")?,
    })
}

fn parse_episode_pass(value: &serde_json::Value) -> Result<[DimensionScores; 2], String> {
    let one = parse_agent_dims(value.get("agent1").ok_or("missing agent1")?)?;
    let two = parse_agent_dims(value.get("agent2").ok_or("missing agent2")?)?;
    Ok([one, two])
}

/// Judges a complete episode `repeats` times at temperature 0 and averages.
/// A malformed or out-of-range pass gets exactly one re-ask.
pub fn judge_episode(
    task: &TaskProfile,
    record: &DialogueRecord,
    judge: &ChatEndpoint,
    prompts: &PromptSet,
    repeats: usize,
) -> Result<EpisodeEval, EvalError> {
    let dialog = crate::dialogue::render_transcript(record, record.turns.len());
    let prompt = render_template(
        &prompts.dimension_judge,
        &[
            ("agent1_name", task.agent(0).name.as_str()),
            ("agent2_name", task.agent(1).name.as_str()),
            ("complete_intro", context_block(task, None).as_str()),
            ("dialog", dialog.trim_end()),
        ],
    );
    let mut passes = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let mut result = None;
        let mut last_err = EvalError::JudgeSchemaError("no attempts made".into());
        for _ in 0..2 {
            let value = judge.judge("", prompt.clone())?;
            match parse_episode_pass(&value) {
                Ok(pair) => match pair[0].validate().and_then(|_| pair[1].validate()) {
                    Ok(()) => {
                        result = Some(pair);
                        break;
                    }
                    Err(err) => last_err = err,
                },
                Err(err) => last_err = EvalError::JudgeSchemaError(err),
            }
        }
        match result {
            Some(pair) => passes.push(pair),
            None => return Err(last_err),
        }
    }
    let firsts: Vec<DimensionScores> = passes.iter().map(|p| p[0]).collect();
    let seconds: Vec<DimensionScores> = passes.iter().map(|p| p[1]).collect();
    let per_agent = [DimensionScores::mean_of(&firsts), DimensionScores::mean_of(&seconds)];
    Ok(EpisodeEval {
        overall: [per_agent[0].overall(), per_agent[1].overall()],
        per_agent,
        repeats: passes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkMode {
    SelfPlay,
    Reference,
}

/// Which tasks the reference model opens: an explicit index list or a seed
/// drawing a balanced assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StarterAssignment {
    Seed(u64),
    Indices(Vec<usize>),
}

impl Default for StarterAssignment {
    fn default() -> Self {
        Self::Seed(0)
    }
}

/// Per-task flags: true when the reference model plays the opening persona.
pub fn reference_starts(assignment: &StarterAssignment, task_count: usize) -> Vec<bool> {
    match assignment {
        StarterAssignment::Indices(indices) => {
            (0..task_count).map(|i| indices.contains(&i)).collect()
        }
        StarterAssignment::Seed(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            (0..task_count).map(|_| rng.gen_bool(0.5)).collect()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub mode: BenchmarkMode,
    pub starter: StarterAssignment,
    pub repeats: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self { mode: BenchmarkMode::SelfPlay, starter: StarterAssignment::default(), repeats: 3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub hard: bool,
    /// True when the reference model played the opening persona.
    pub reference_started: bool,
    pub goal: Option<f64>,
    pub overall: Option<f64>,
    pub per_agent: Option<[DimensionScores; 2]>,
    pub turns: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Aggregate {
    pub tasks: usize,
    pub goal: f64,
    pub overall: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: BenchmarkMode,
    pub results: Vec<TaskResult>,
    pub full: Aggregate,
    pub hard: Aggregate,
    pub failed_tasks: usize,
}

fn aggregate<'a>(results: impl Iterator<Item = &'a TaskResult>) -> Aggregate {
    let scored: Vec<&TaskResult> = results.filter(|r| r.goal.is_some()).collect();
    let n = scored.len().max(1) as f64;
    Aggregate {
        tasks: scored.len(),
        goal: scored.iter().filter_map(|r| r.goal).sum::<f64>() / n,
        overall: scored.iter().filter_map(|r| r.overall).sum::<f64>() / n,
    }
}

/// Runs the benchmark over `tasks`. Episodes are plain native self-play
/// (no strategy injection, no step rating); the judge scores each finished
/// episode. Failed tasks carry their error and are excluded from the
/// aggregates, never fabricated.
#[allow(clippy::too_many_arguments)]
pub fn run_benchmark(
    tasks: &[TaskProfile],
    agent: &ChatEndpoint,
    reference: Option<&ChatEndpoint>,
    judge: &ChatEndpoint,
    prompts: &PromptSet,
    engine_cfg: &EngineConfig,
    cfg: &BenchmarkConfig,
    log: Option<&WireLog>,
) -> EvalReport {
    let episode_cfg = EngineConfig {
        max_turns: engine_cfg.max_turns,
        init_turns: engine_cfg.max_turns,
        rate_from_turn: engine_cfg.max_turns,
        thresholds: engine_cfg.thresholds.clone(),
        sample_count: engine_cfg.sample_count,
    };
    let ref_starts = reference_starts(&cfg.starter, tasks.len());
    let mut results = Vec::with_capacity(tasks.len());
    for (idx, task) in tasks.iter().enumerate() {
        let ref_opens = cfg.mode == BenchmarkMode::Reference && ref_starts[idx];
        let outcome = run_one(
            task, agent, reference, judge, prompts, &episode_cfg, cfg, ref_opens, log,
        );
        results.push(match outcome {
            Ok(result) => result,
            Err(err) => TaskResult {
                task_id: task.task_id.clone(),
                hard: task.hard_flag,
                reference_started: ref_opens,
                goal: None,
                overall: None,
                per_agent: None,
                turns: None,
                error: Some(err.to_string()),
            },
        });
    }
    EvalReport {
        mode: cfg.mode,
        full: aggregate(results.iter()),
        hard: aggregate(results.iter().filter(|r| r.hard)),
        failed_tasks: results.iter().filter(|r| r.error.is_some()).count(),
        results,
    }
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    task: &TaskProfile,
    agent: &ChatEndpoint,
    reference: Option<&ChatEndpoint>,
    judge: &ChatEndpoint,
    prompts: &PromptSet,
    episode_cfg: &EngineConfig,
    cfg: &BenchmarkConfig,
    ref_opens: bool,
    log: Option<&WireLog>,
) -> Result<TaskResult, EvalError> {
    // In reference mode the persona sides are assigned to models: the
    // reference plays the opening persona on flagged tasks.
    let (sides, scored_side): ([&ChatEndpoint; 2], Option<usize>) = match cfg.mode {
        BenchmarkMode::SelfPlay => ([agent, agent], None),
        BenchmarkMode::Reference => {
            let reference = reference
                .ok_or_else(|| EvalError::Episode("reference mode without reference provider".into()))?;
            if ref_opens {
                ([reference, agent], Some(1))
            } else {
                ([agent, reference], Some(0))
            }
        }
    };
    let handles = EngineHandles { agents: sides, expert: agent, prompts, log };
    let engine = DialogueEngine::new(handles, episode_cfg);
    let record = engine
        .run_dialogue(task, 0, 1)
        .map_err(|e| EvalError::Episode(e.to_string()))?;
    let eval = judge_episode(task, &record, judge, prompts, cfg.repeats)?;
    let (goal, overall) = match scored_side {
        // self-play reports the mean of both sides
        None => (
            (eval.per_agent[0].goal + eval.per_agent[1].goal) / 2.0,
            (eval.overall[0] + eval.overall[1]) / 2.0,
        ),
        // reference mode scores only the agent under test
        Some(side) => (eval.per_agent[side].goal, eval.overall[side]),
    };
    Ok(TaskResult {
        task_id: task.task_id.clone(),
        hard: task.hard_flag,
        reference_started: ref_opens,
        goal: Some(goal),
        overall: Some(overall),
        per_agent: Some(eval.per_agent),
        turns: Some(record.turns.len()),
        error: None,
    })
}

/// One goal-curve point: the judged current-goal pair after `turn_index`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub turn_index: usize,
    pub goal_c: [f64; 2],
}

/// Judges every transcript prefix (step1/step2 schema, one pass,
/// temperature 0) and returns the per-turn goal curve.
pub fn goal_curve(
    task: &TaskProfile,
    record: &DialogueRecord,
    judge: &ChatEndpoint,
    prompts: &PromptSet,
) -> Result<Vec<CurvePoint>, EvalError> {
    let mut points = Vec::with_capacity(record.turns.len());
    for k in 1..=record.turns.len() {
        let mut prefix = record.clone();
        prefix.turns.truncate(k);
        let prompt = build_rating_prompt(prompts, task, &prefix)
            .map_err(|e| EvalError::Episode(e.to_string()))?;
        let value = judge.judge("", prompt)?;
        let score = |key: &str| -> Result<f64, EvalError> {
            let slot = value
                .get(key)
                .ok_or_else(|| EvalError::JudgeSchemaError(format!("missing {key}")))?;
            number_from(slot.get("score").unwrap_or(slot))
                .ok_or_else(|| EvalError::JudgeSchemaError(format!("{key} score not numeric")))
        };
        points.push(CurvePoint { turn_index: k - 1, goal_c: [score("step1")?, score("step2")?] });
    }
    Ok(points)
}

/// Flags a prolonged deadlock: the last six points of the mean curve vary
/// by less than half a point.
pub fn is_plateau(points: &[CurvePoint]) -> bool {
    if points.len() < 6 {
        return false;
    }
    let tail = &points[points.len() - 6..];
    let means: Vec<f64> = tail.iter().map(|p| (p.goal_c[0] + p.goal_c[1]) / 2.0).collect();
    let max = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = means.iter().cloned().fold(f64::INFINITY, f64::min);
    max - min < 0.5
}

/// Least-squares cubic fit, lowest-order coefficient first. Used only by
/// the report emitter for curve summaries.
pub fn fit_cubic(points: &[(f64, f64)]) -> Option<[f64; 4]> {
    if points.len() < 4 {
        return None;
    }
    // normal equations for the Vandermonde system
    let mut ata = [[0.0f64; 4]; 4];
    let mut atb = [0.0f64; 4];
    for &(x, y) in points {
        let powers = [1.0, x, x * x, x * x * x];
        for i in 0..4 {
            atb[i] += powers[i] * y;
            for j in 0..4 {
                ata[i][j] += powers[i] * powers[j];
            }
        }
    }
    // Gaussian elimination with partial pivoting
    let mut m = ata;
    let mut b = atb;
    for col in 0..4 {
        let pivot = (col..4).max_by(|&a, &bb| {
            m[a][col].abs().partial_cmp(&m[bb][col].abs()).unwrap()
        })?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..4 {
            let factor = m[row][col] / m[col][col];
            for k in col..4 {
                m[row][k] -= factor * m[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut out = [0.0f64; 4];
    for row in (0..4).rev() {
        let mut sum = b[row];
        for k in row + 1..4 {
            sum -= m[row][k] * out[k];
        }
        out[row] = sum / m[row][row];
    }
    Some(out)
}
