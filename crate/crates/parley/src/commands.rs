//! Subcommand implementations wiring the pipeline end to end.
//!
//! Outputs land under the configured output root:
//! `runs/<id>/` (wire log, resolved config), `corpus/<id>/` (dialogues,
//! SFT pairs, stats), `sif/<id>/` and `eval/<id>/` (reports and plot data).
//! Workers process tasks in parallel; results are flushed in task order so
//! scripted reruns produce byte-identical outputs. Cancellation or task
//! failures still flush what finished, marked `partial = true`.

use crate::config::{ConfigError, ProviderSet, RunConfig};
use crate::corpus::{
    corpus_stats, export_sft, filter_decision, generate_with_retries, CorpusError, FilterDecision,
};
use crate::dialogue::DialogueRecord;
use crate::engine::{DialogueEngine, EngineHandles};
use crate::eval::{fit_cubic, goal_curve, is_plateau, run_benchmark, BenchmarkMode, CurvePoint};
use crate::gateway::WireLog;
use crate::profile::load_tasks;
use crate::sif::{
    judge_relevance, s_div, s_rel, s_sif, similarity_matrix, AgentSif, SifError, SifReport,
};
use anyhow::Context;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;

/// Shared command context: configuration plus run-mode switches.
pub struct CommandCtx {
    pub config: RunConfig,
    pub mock_dir: Option<PathBuf>,
    pub limit: Option<usize>,
    pub cancel: Arc<AtomicBool>,
}

impl CommandCtx {
    fn tasks(&self) -> anyhow::Result<Vec<crate::profile::TaskProfile>> {
        let mut tasks = load_tasks(&self.config.paths.tasks_file)
            .with_context(|| format!("loading {}", self.config.paths.tasks_file.display()))?;
        if let Some(limit) = self.limit {
            tasks.truncate(limit);
        }
        Ok(tasks)
    }

    fn workers(&self) -> usize {
        if self.mock_dir.is_some() {
            1 // scripted queues are ordered; one worker keeps replay deterministic
        } else {
            self.config.run.workers.max(1)
        }
    }
}

/// One line of `dialogues.jsonl`: the full record plus attempt accounting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskOutcome {
    #[serde(flatten)]
    pub record: DialogueRecord,
    pub attempts_used: usize,
    pub keep_decision: FilterDecision,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FailedTask {
    task_id: String,
    error: String,
    attempts: usize,
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::fs::File::create(path)?;
    for item in items {
        writeln!(file, "{}", serde_json::to_string(&item)?)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Fine-tuning parameters echoed for the external trainer; nothing in this
/// pipeline consumes them.
fn training_suggestion() -> serde_json::Value {
    serde_json::json!({
        "note": "suggested LoRA fine-tuning parameters for the exported sft.jsonl; not consumed by this pipeline",
        "parameters": {
            "train_batch_size": 32,
            "eval_batch_size": 16,
            "warmup_ratio": 0.03,
            "warmup_steps": 60,
            "learning_rate": 5e-5,
            "learning_rate_llama": 1e-5,
            "epoch_num": 3.0,
            "cutoff_len": 4096,
            "val_size": 0.1,
            "lora_rank": 8,
            "lora_alpha": 16,
        },
    })
}

/// Generates the corpus: per task, dialogue attempts with regeneration,
/// then exports records, SFT pairs, and stats.
pub fn cmd_generate(ctx: &CommandCtx) -> anyhow::Result<i32> {
    let config = &ctx.config;
    let prompts = config.prompts()?;
    config.write_resolved()?;
    let log = Arc::new(WireLog::create(&config.run_dir().join("wire.jsonl"))?);
    let providers = ProviderSet::build(config, ctx.mock_dir.as_deref(), Some(log.clone()))?;
    let tasks = ctx.tasks()?;

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<(DialogueRecord, usize), CorpusError>>>> =
        Mutex::new((0..tasks.len()).map(|_| None).collect());
    let workers = ctx.workers().min(tasks.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= tasks.len() || ctx.cancel.load(Ordering::SeqCst) {
                    break;
                }
                let task = &tasks[idx];
                let handles = EngineHandles {
                    agents: [&providers.expert, &providers.expert],
                    expert: &providers.expert,
                    prompts: &prompts,
                    log: Some(&log),
                };
                let engine = DialogueEngine {
                    handles,
                    cfg: &config.engine,
                    parse_retries: config.run.parse_retries,
                };
                let result = generate_with_retries(&task.task_id, &config.filter, |attempt| {
                    engine.run_dialogue(task, 0, attempt)
                });
                if let Ok((record, _)) = &result {
                    log.note(
                        "filter",
                        serde_json::json!({
                            "task_id": task.task_id,
                            "final_goal_c": record.final_goal_scalar(),
                            "nsi_used": record.nsi_used,
                        }),
                    );
                }
                slots.lock().unwrap()[idx] = Some(result);
            });
        }
    });

    let slots = slots.into_inner().unwrap();
    let cancelled = ctx.cancel.load(Ordering::SeqCst);
    let mut outcomes: Vec<TaskOutcome> = Vec::new();
    let mut failures: Vec<FailedTask> = Vec::new();
    let mut total_attempts = 0usize;
    let mut incomplete = 0usize;
    for (task, slot) in tasks.iter().zip(slots) {
        match slot {
            Some(Ok((record, attempts_used))) => {
                total_attempts += attempts_used;
                let keep_decision = filter_decision(&record, &config.filter)
                    .unwrap_or(FilterDecision::Regenerate);
                outcomes.push(TaskOutcome { record, attempts_used, keep_decision });
            }
            Some(Err(err)) => {
                let attempts = match &err {
                    CorpusError::TaskFailed { attempts, .. } => *attempts,
                    CorpusError::MissingFinalRating => 0,
                };
                total_attempts += attempts;
                failures.push(FailedTask {
                    task_id: task.task_id.clone(),
                    error: err.to_string(),
                    attempts,
                });
            }
            None => incomplete += 1,
        }
    }

    let corpus_dir = config.corpus_dir();
    write_jsonl(&corpus_dir.join("dialogues.jsonl"), outcomes.iter())?;
    let sft: Vec<_> =
        outcomes.iter().flat_map(|o| export_sft(&prompts, &o.record)).collect();
    write_jsonl(&corpus_dir.join("sft.jsonl"), sft.iter())?;
    let records: Vec<DialogueRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
    let stats = corpus_stats(&records, total_attempts);
    let partial = cancelled || incomplete > 0;
    write_json(
        &corpus_dir.join("stats.json"),
        &serde_json::json!({
            "stats": stats,
            "failed_tasks": failures,
            "incomplete_tasks": incomplete,
            "partial": partial,
        }),
    )?;
    write_json(&corpus_dir.join("training_suggested.json"), &training_suggestion())?;

    eprintln!(
        "generate: {} dialogues, {} sft examples, {} failed, {} attempts total",
        outcomes.len(),
        sft.len(),
        failures.len(),
        total_attempts
    );
    if failures.is_empty() && !partial {
        Ok(EXIT_OK)
    } else {
        Ok(EXIT_PARTIAL)
    }
}

fn read_outcomes(path: &Path) -> anyhow::Result<Vec<TaskOutcome>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {} (run `generate` first)", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| serde_json::from_str::<TaskOutcome>(line).map_err(Into::into))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalKind {
    Social,
    Sif,
    Curves,
}

impl std::str::FromStr for EvalKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "social" => Ok(Self::Social),
            "sif" => Ok(Self::Sif),
            "curves" => Ok(Self::Curves),
            other => Err(format!("unknown evaluation {other:?}: expected social|sif|curves")),
        }
    }
}

pub fn cmd_evaluate(ctx: &CommandCtx, which: EvalKind) -> anyhow::Result<i32> {
    match which {
        EvalKind::Social => cmd_evaluate_social(ctx),
        EvalKind::Sif => cmd_evaluate_sif(ctx),
        EvalKind::Curves => cmd_evaluate_curves(ctx),
    }
}

fn cmd_evaluate_social(ctx: &CommandCtx) -> anyhow::Result<i32> {
    let config = &ctx.config;
    let prompts = config.prompts()?;
    config.write_resolved()?;
    let log = Arc::new(WireLog::create(&config.run_dir().join("wire.jsonl"))?);
    let providers = ProviderSet::build(config, ctx.mock_dir.as_deref(), Some(log.clone()))?;
    let tasks = ctx.tasks()?;
    let bench = config.eval.benchmark_config();
    if bench.mode == BenchmarkMode::Reference && providers.reference.is_none() {
        return Err(ConfigError::MissingProvider("reference").into());
    }
    let report = run_benchmark(
        &tasks,
        &providers.expert,
        providers.reference.as_ref(),
        &providers.judge,
        &prompts,
        &config.engine,
        &bench,
        Some(&log),
    );
    let dir = config.eval_dir();
    write_json(&dir.join("report.json"), &report)?;

    let mut writer = csv::Writer::from_path(dir.join("report.csv"))?;
    writer.write_record(["mode", "subset", "tasks", "goal", "overall"])?;
    let mode = match report.mode {
        BenchmarkMode::SelfPlay => "self_play",
        BenchmarkMode::Reference => "reference",
    };
    writer.write_record([
        mode,
        "full",
        &report.full.tasks.to_string(),
        &format!("{:.2}", report.full.goal),
        &format!("{:.2}", report.full.overall),
    ])?;
    writer.write_record([
        mode,
        "hard",
        &report.hard.tasks.to_string(),
        &format!("{:.2}", report.hard.goal),
        &format!("{:.2}", report.hard.overall),
    ])?;
    writer.flush()?;

    eprintln!(
        "evaluate social: {} tasks, goal {:.2}, overall {:.2}, {} failed",
        report.full.tasks, report.full.goal, report.full.overall, report.failed_tasks
    );
    Ok(if report.failed_tasks == 0 { EXIT_OK } else { EXIT_PARTIAL })
}

fn cmd_evaluate_sif(ctx: &CommandCtx) -> anyhow::Result<i32> {
    let config = &ctx.config;
    let prompts = config.prompts()?;
    let providers = ProviderSet::build(config, ctx.mock_dir.as_deref(), None)?;
    let embed = providers
        .embed
        .as_ref()
        .ok_or(ConfigError::MissingProvider("embedding"))?;
    let outcomes = read_outcomes(&config.corpus_dir().join("dialogues.jsonl"))?;
    let dir = config.sif_dir();
    std::fs::create_dir_all(&dir)?;

    let mut per_dialogue: Vec<[Option<AgentSif>; 2]> = Vec::new();
    let mut failures = 0usize;
    for outcome in &outcomes {
        let record = &outcome.record;
        let mut pair: [Option<AgentSif>; 2] = [None, None];
        for agent in 0..2 {
            let turns = record.turns_of(agent);
            let name = &record.task.agents[agent].name;
            let matrix = match similarity_matrix(&turns, name, embed) {
                Ok(matrix) => matrix,
                Err(SifError::InsufficientActions(_)) => continue,
                Err(err) => {
                    eprintln!("sif: {} agent {agent}: {err}", record.task.task_id);
                    failures += 1;
                    continue;
                }
            };
            let relevance = match judge_relevance(
                &record.task,
                record,
                agent,
                &providers.judge,
                &prompts,
                config.sif.history_window,
                3,
            ) {
                Ok(scores) => scores,
                Err(err) => {
                    eprintln!("sif: {} agent {agent}: {err}", record.task.task_id);
                    failures += 1;
                    continue;
                }
            };
            let div = s_div(&matrix, config.sif.alpha);
            let rel = s_rel(&relevance);
            pair[agent] = Some(AgentSif { s_div: div, s_rel: rel, s_sif: s_sif(div, rel) });
            write_json(
                &dir.join(format!("similarity_{}_{agent}.json", record.task.task_id)),
                &serde_json::json!({
                    "task_id": record.task.task_id,
                    "agent_index": agent,
                    "n": matrix.n,
                    "matrix": matrix.values,
                    "relevance": relevance.per_action,
                    "justifications": relevance.justifications,
                }),
            )?;
        }
        per_dialogue.push(pair);
    }

    let mean_turns = if outcomes.is_empty() {
        0.0
    } else {
        outcomes.iter().map(|o| o.record.turns.len()).sum::<usize>() as f64 / outcomes.len() as f64
    };
    let report = SifReport::from_scores(&per_dialogue, mean_turns);
    write_json(&dir.join("report.json"), &report)?;

    let mut writer = csv::Writer::from_path(dir.join("report.csv"))?;
    writer.write_record([
        "s_div_agent1", "s_rel_agent1", "s_sif_agent1",
        "s_div_agent2", "s_rel_agent2", "s_sif_agent2",
        "s_div_avg", "s_rel_avg", "s_sif_avg", "turns_avg",
    ])?;
    let pct = |x: f64| format!("{:.2}", x * 100.0);
    writer.write_record([
        pct(report.per_agent[0].s_div),
        pct(report.per_agent[0].s_rel),
        pct(report.per_agent[0].s_sif),
        pct(report.per_agent[1].s_div),
        pct(report.per_agent[1].s_rel),
        pct(report.per_agent[1].s_sif),
        pct(report.avg_s_div),
        pct(report.avg_s_rel),
        pct(report.avg_s_sif),
        format!("{:.1}", report.mean_turns),
    ])?;
    writer.flush()?;

    eprintln!(
        "evaluate sif: {} dialogues, S_div {:.2}, S_rel {:.2}, S_sif {:.2}",
        report.dialogues,
        report.avg_s_div * 100.0,
        report.avg_s_rel * 100.0,
        report.avg_s_sif * 100.0
    );
    Ok(if failures == 0 { EXIT_OK } else { EXIT_PARTIAL })
}

#[derive(Debug, Serialize)]
struct CurveEntry {
    task_id: String,
    points: Vec<CurvePoint>,
    plateau: bool,
    cubic_fit: Option<[f64; 4]>,
}

fn cmd_evaluate_curves(ctx: &CommandCtx) -> anyhow::Result<i32> {
    let config = &ctx.config;
    let prompts = config.prompts()?;
    let providers = ProviderSet::build(config, ctx.mock_dir.as_deref(), None)?;
    let outcomes = read_outcomes(&config.corpus_dir().join("dialogues.jsonl"))?;

    let mut entries = Vec::new();
    let mut failures = 0usize;
    for outcome in &outcomes {
        match goal_curve(&outcome.record.task, &outcome.record, &providers.judge, &prompts) {
            Ok(points) => {
                let xy: Vec<(f64, f64)> = points
                    .iter()
                    .map(|p| (p.turn_index as f64, (p.goal_c[0] + p.goal_c[1]) / 2.0))
                    .collect();
                entries.push(CurveEntry {
                    task_id: outcome.record.task.task_id.clone(),
                    plateau: is_plateau(&points),
                    cubic_fit: fit_cubic(&xy),
                    points,
                });
            }
            Err(err) => {
                eprintln!("curves: {}: {err}", outcome.record.task.task_id);
                failures += 1;
            }
        }
    }
    write_json(&config.eval_dir().join("curves.json"), &entries)?;
    eprintln!("evaluate curves: {} dialogues, {} failed", entries.len(), failures);
    Ok(if failures == 0 { EXIT_OK } else { EXIT_PARTIAL })
}

/// Recomputes corpus statistics from `dialogues.jsonl`.
pub fn cmd_stats(ctx: &CommandCtx) -> anyhow::Result<i32> {
    let config = &ctx.config;
    let outcomes = read_outcomes(&config.corpus_dir().join("dialogues.jsonl"))?;
    let records: Vec<DialogueRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
    let total_attempts = outcomes.iter().map(|o| o.attempts_used).sum();
    let stats = corpus_stats(&records, total_attempts);
    write_json(
        &config.corpus_dir().join("stats.json"),
        &serde_json::json!({"stats": stats, "failed_tasks": [], "incomplete_tasks": 0, "partial": false}),
    )?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(EXIT_OK)
}

/// Re-exports SFT pairs from the stored dialogue records.
pub fn cmd_export_sft(ctx: &CommandCtx) -> anyhow::Result<i32> {
    let config = &ctx.config;
    let prompts = config.prompts()?;
    let outcomes = read_outcomes(&config.corpus_dir().join("dialogues.jsonl"))?;
    let sft: Vec<_> =
        outcomes.iter().flat_map(|o| export_sft(&prompts, &o.record)).collect();
    write_jsonl(&config.corpus_dir().join("sft.jsonl"), sft.iter())?;
    eprintln!("export-sft: {} examples", sft.len());
    Ok(EXIT_OK)
}

/// Maps command-level errors onto the documented exit codes.
pub fn exit_code_for(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<ConfigError>().is_some() {
        EXIT_CONFIG
    } else {
        EXIT_PARTIAL
    }
}
