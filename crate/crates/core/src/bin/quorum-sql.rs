//! Batch CLI: run benchmark instances through the consensus loop, evaluate
//! record files, and sweep ablation axes.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use quorum_sql::cli::{self, CliConfig, SweepAxis};

#[derive(Parser)]
#[command(name = "quorum-sql", version, about = "Consensus-based text-to-SQL batch runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a benchmark batch and write records.jsonl + summary.json.
    Run(RunArgs),
    /// Score a records file and write report.md + report.json.
    Eval(EvalArgs),
    /// Run the batch once per axis value and write an ablation table.
    Sweep(SweepArgs),
}

/// Flags mirror the flat TOML config keys; a flag always wins over the
/// file.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Flat TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    benchmark_name: Option<String>,
    #[arg(long)]
    questions: Option<PathBuf>,
    #[arg(long)]
    tables: Option<PathBuf>,
    #[arg(long)]
    database_root: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    /// "mock" or "remote".
    #[arg(long)]
    backend: Option<String>,
    /// Mock script JSON (ordered matcher/response entries).
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    sample_n: Option<usize>,
    #[arg(long)]
    sample_seed: Option<u64>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    shot_pool: Option<PathBuf>,
    #[arg(long)]
    max_review_turns: Option<usize>,
    #[arg(long)]
    max_debug_turns: Option<usize>,
    #[arg(long)]
    n_reviewers: Option<usize>,
    #[arg(long)]
    k_shots: Option<usize>,
    /// "cot" or "pot".
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    history_budget: Option<usize>,
    #[arg(long)]
    render_row_cap: Option<usize>,
    #[arg(long)]
    sql_timeout_ms: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<CliConfig> {
        let mut config = match &self.config {
            Some(path) => CliConfig::from_toml_file(path)?,
            None => CliConfig::default(),
        };
        macro_rules! override_field {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = &self.$field {
                    config.$field = v.clone();
                })*
            };
        }
        override_field!(benchmark_name, split, backend, model, mode);
        macro_rules! override_opt {
            ($($field:ident),* $(,)?) => {
                $(if self.$field.is_some() {
                    config.$field = self.$field.clone();
                })*
            };
        }
        override_opt!(questions, tables, database_root, script, cache_dir, shot_pool, sample_n);
        macro_rules! override_copy {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = self.$field {
                    config.$field = v;
                })*
            };
        }
        override_copy!(
            workers,
            sample_seed,
            max_review_turns,
            max_debug_turns,
            n_reviewers,
            k_shots,
            temperature,
            history_budget,
            render_row_cap,
            sql_timeout_ms,
        );
        if let Some(v) = &self.out_dir {
            config.out_dir = v.clone();
        }
        Ok(config)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Records file (JSON lines) produced by `run`.
    #[arg(long)]
    records: PathBuf,
    /// JSON map of instance id -> error label (failures only).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Second records file for a fold-level significance test.
    #[arg(long)]
    compare: Option<PathBuf>,
    /// Fold count for the significance test.
    #[arg(long, default_value_t = 10)]
    folds: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// One of: k_shots, n_reviewers, mode.
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values, e.g. "1,3" or "cot,pot".
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => args
            .config
            .resolve()
            .and_then(|config| cli::cmd_run(&config))
            .map(|summary| {
                println!("{}", serde_json::to_string_pretty(&summary).unwrap());
                if summary.client_errors > 0 {
                    ExitCode::from(2)
                } else {
                    ExitCode::SUCCESS
                }
            }),
        Command::Eval(args) => args
            .config
            .resolve()
            .and_then(|config| {
                cli::cmd_eval(
                    &config,
                    &args.records,
                    args.labels.as_deref(),
                    args.compare.as_deref(),
                    args.folds,
                )
            })
            .map(|report| {
                println!("accuracy: {:.4}", report.accuracy);
                ExitCode::SUCCESS
            }),
        Command::Sweep(args) => args
            .config
            .resolve()
            .and_then(|config| {
                let axis = SweepAxis::parse(&args.axis)?;
                cli::cmd_sweep(&config, axis, &args.values)
            })
            .map(|table| {
                println!("{table}");
                ExitCode::SUCCESS
            }),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
