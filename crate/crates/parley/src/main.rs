use clap::{Args, Parser, Subcommand};
use parley::commands::{
    cmd_evaluate, cmd_export_sft, cmd_generate, cmd_stats, exit_code_for, CommandCtx, EvalKind,
    EXIT_CONFIG,
};
use parley::config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

#[derive(Parser)]
#[command(
    name = "parley",
    about = "Generate strategy-injected social dialogue corpora and evaluate them"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration file (.toml or .json)
    #[arg(long)]
    config: PathBuf,
    /// Override the tasks file from the config
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// Override the run id from the config
    #[arg(long)]
    run_id: Option<String>,
    /// Directory of scripted provider files; replaces all live providers
    #[arg(long)]
    mock: Option<PathBuf>,
    /// Process only the first N tasks
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dialogue corpus and SFT export
    Generate(CommonArgs),
    /// Run an evaluation suite: social, sif, or curves
    Evaluate {
        which: EvalKind,
        #[command(flatten)]
        args: CommonArgs,
    },
    /// Recompute corpus statistics from stored dialogues
    Stats(CommonArgs),
    /// Re-export SFT pairs from stored dialogues
    ExportSft(CommonArgs),
}

fn build_ctx(args: &CommonArgs) -> anyhow::Result<CommandCtx> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(tasks) = &args.tasks {
        config.paths.tasks_file = tasks.clone();
    }
    if let Some(run_id) = &args.run_id {
        config.run_id = run_id.clone();
    }
    config.validate()?;
    let cancel = Arc::new(AtomicBool::new(false));
    let handler_flag = Arc::clone(&cancel);
    let _ = ctrlc::set_handler(move || {
        eprintln!("cancellation requested: flushing partial outputs");
        handler_flag.store(true, Ordering::SeqCst);
    });
    Ok(CommandCtx { config, mock_dir: args.mock.clone(), limit: args.limit, cancel })
}

fn dispatch(command: &Command) -> anyhow::Result<i32> {
    match command {
        Command::Generate(args) => cmd_generate(&build_ctx(args)?),
        Command::Evaluate { which, args } => cmd_evaluate(&build_ctx(args)?, *which),
        Command::Stats(args) => cmd_stats(&build_ctx(args)?),
        Command::ExportSft(args) => cmd_export_sft(&build_ctx(args)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // usage problems (including an unknown evaluation name) exit 1
            let _ = err.print();
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    match dispatch(&cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err) as u8)
        }
    }
}
