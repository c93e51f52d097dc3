//! Batch front end: run a benchmark through the consensus loop, evaluate
//! record files, and sweep ablation axes.
//!
//! Configuration is a flat TOML file; every key has a matching command-line
//! flag and flags win. Outputs are `records.jsonl` (one run record per
//! instance, sorted by instance id so files are byte-stable regardless of
//! worker count), `summary.json`, and markdown reports.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Duration;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use crate::datasets::{
    self, BenchmarkManifest, LoadedBenchmark, RawQuestion, Split,
};
use crate::evaluator::{self, ScoredRecord};
use crate::llm::{CachedBackend, ChatBackend, HttpBackend, MockScript};
use crate::orchestrator::{Runner, Shot};
use crate::selector::{self, EmbeddedExample};
use crate::types::{RunConfig, RunRecord, Termination, WriterMode};

/// Everything configurable about a batch, flat so it maps 1:1 onto TOML
/// keys and flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub benchmark_name: String,
    pub questions: Option<PathBuf>,
    pub tables: Option<PathBuf>,
    pub database_root: Option<PathBuf>,
    pub split: String,
    /// "mock" (requires `script`) or "remote" (credentials from env).
    pub backend: String,
    pub script: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub sample_n: Option<usize>,
    pub sample_seed: u64,
    pub model: String,
    /// Questions-format JSON whose (question, gold SQL) pairs form the
    /// k-shot demonstration pool. Absent → zero-shot.
    pub shot_pool: Option<PathBuf>,
    pub max_review_turns: usize,
    pub max_debug_turns: usize,
    pub n_reviewers: usize,
    pub k_shots: usize,
    pub mode: String,
    pub temperature: f64,
    pub history_budget: usize,
    pub render_row_cap: usize,
    pub sql_timeout_ms: u64,
}

impl Default for CliConfig {
    fn default() -> Self {
        let run = RunConfig::default();
        Self {
            benchmark_name: "benchmark".into(),
            questions: None,
            tables: None,
            database_root: None,
            split: "dev".into(),
            backend: "mock".into(),
            script: None,
            cache_dir: None,
            out_dir: PathBuf::from("out"),
            workers: 1,
            sample_n: None,
            sample_seed: 0,
            model: "default-model".into(),
            shot_pool: None,
            max_review_turns: run.max_review_turns,
            max_debug_turns: run.max_debug_turns,
            n_reviewers: run.n_reviewers,
            k_shots: run.k_shots,
            mode: run.mode.to_string(),
            temperature: run.temperature,
            history_budget: run.history_budget,
            render_row_cap: run.render_row_cap,
            sql_timeout_ms: run.sql_timeout.as_millis() as u64,
        }
    }
}

impl CliConfig {
    pub fn from_toml_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.workers == 0 {
            bail!("workers must be >= 1");
        }
        match self.backend.as_str() {
            "mock" => {
                if self.script.is_none() {
                    bail!("mock backend requires `script`");
                }
            }
            "remote" => {}
            other => bail!("unknown backend `{other}` (expected mock or remote)"),
        }
        self.writer_mode()?;
        self.split()?;
        Ok(())
    }

    pub fn writer_mode(&self) -> anyhow::Result<WriterMode> {
        match self.mode.as_str() {
            "cot" => Ok(WriterMode::Cot),
            "pot" => Ok(WriterMode::Pot),
            other => bail!("unknown mode `{other}` (expected cot or pot)"),
        }
    }

    fn split(&self) -> anyhow::Result<Split> {
        match self.split.as_str() {
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            "train" => Ok(Split::Train),
            other => bail!("unknown split `{other}`"),
        }
    }

    pub fn run_config(&self) -> anyhow::Result<RunConfig> {
        Ok(RunConfig {
            max_review_turns: self.max_review_turns,
            max_debug_turns: self.max_debug_turns,
            n_reviewers: self.n_reviewers,
            k_shots: self.k_shots,
            mode: self.writer_mode()?,
            temperature: self.temperature,
            history_budget: self.history_budget,
            render_row_cap: self.render_row_cap,
            sql_timeout: Duration::from_millis(self.sql_timeout_ms),
        })
    }

    pub fn manifest(&self) -> anyhow::Result<BenchmarkManifest> {
        let questions = self
            .questions
            .clone()
            .context("config needs `questions` (path to the questions JSON)")?;
        let tables = self
            .tables
            .clone()
            .context("config needs `tables` (path to the schema JSON)")?;
        let database_root = self
            .database_root
            .clone()
            .context("config needs `database_root`")?;
        Ok(BenchmarkManifest {
            name: self.benchmark_name.clone(),
            questions,
            tables,
            database_root,
            split: self.split()?,
        })
    }
}

enum BackendSpec {
    /// Script JSON text; every instance gets a fresh cursor so parallel
    /// batches stay deterministic.
    Mock(String),
    Remote(Arc<dyn ChatBackend>),
}

impl BackendSpec {
    fn build(config: &CliConfig) -> anyhow::Result<Self> {
        match config.backend.as_str() {
            "mock" => {
                let path = config.script.as_ref().context("mock backend requires `script`")?;
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("cannot read script {}", path.display()))?;
                MockScript::from_json(&text)
                    .with_context(|| format!("invalid script {}", path.display()))?;
                Ok(BackendSpec::Mock(text))
            }
            _ => {
                let http = HttpBackend::from_env().context(
                    "remote backend requires QUORUM_SQL_BASE_URL (and usually QUORUM_SQL_API_KEY)",
                )?;
                let backend: Arc<dyn ChatBackend> = match &config.cache_dir {
                    Some(dir) => Arc::new(CachedBackend::new(http, dir)?),
                    None => Arc::new(http),
                };
                Ok(BackendSpec::Remote(backend))
            }
        }
    }

    fn for_instance(&self) -> Arc<dyn ChatBackend> {
        match self {
            BackendSpec::Mock(text) => {
                Arc::new(MockScript::from_json(text).expect("script validated at startup"))
            }
            BackendSpec::Remote(backend) => backend.clone(),
        }
    }
}

fn load_shot_pool(config: &CliConfig) -> anyhow::Result<Vec<EmbeddedExample>> {
    let Some(path) = &config.shot_pool else {
        return Ok(Vec::new());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read shot pool {}", path.display()))?;
    let raw: Vec<RawQuestion> = serde_json::from_str(&text)
        .with_context(|| format!("invalid shot pool {}", path.display()))?;
    let pairs: Vec<(String, String)> = raw
        .into_iter()
        .filter_map(|q| {
            let sql = q.sql.or(q.query)?;
            Some((q.question, sql))
        })
        .collect();
    let hash = selector::pool_content_hash(&pairs);
    let sidecar = path.with_extension("emb");
    if let Ok(pool) = selector::read_sidecar(&sidecar, hash) {
        return Ok(pool);
    }
    let pool = selector::embed_pool(&pairs);
    if let Err(e) = selector::write_sidecar(&sidecar, &pool, hash) {
        log::warn!("cannot persist embedding sidecar: {e}");
    }
    Ok(pool)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchSummary {
    pub instances: usize,
    /// Absent when records lack gold SQL.
    pub accuracy: Option<f64>,
    pub terminations: BTreeMap<String, usize>,
    pub mean_review_turns: f64,
    pub mean_debug_turns: f64,
    pub total_llm_calls: usize,
    pub client_errors: usize,
    pub records_path: PathBuf,
}

fn termination_key(t: Termination) -> &'static str {
    match t {
        Termination::Consensus => "consensus",
        Termination::ReviewCap => "review_cap",
        Termination::DebugExhausted => "debug_exhausted",
        Termination::ClientError => "client_error",
    }
}

/// Run the whole batch: load the benchmark, pick the instance subset, run
/// every instance over a bounded worker pool, score, and persist records +
/// summary.
pub fn cmd_run(config: &CliConfig) -> anyhow::Result<BatchSummary> {
    config.validate()?;
    let manifest = config.manifest()?;
    let benchmark = load_benchmark_logged(&manifest)?;
    let run_config = config.run_config()?;
    let instances = match config.sample_n {
        Some(n) => datasets::subsample(&benchmark.instances, n, config.sample_seed)?,
        None => benchmark.instances.clone(),
    };
    let pool = load_shot_pool(config)?;
    let backend = BackendSpec::build(config)?;
    std::fs::create_dir_all(&config.out_dir)?;

    let next = AtomicUsize::new(0);
    let next_ref = &next;
    let (tx, rx) = mpsc::channel::<RunRecord>();
    let benchmark_ref = &benchmark;
    let instances_ref = &instances;
    let pool_ref = &pool;
    let run_config_ref = &run_config;
    let backend_ref = &backend;
    let model = config.model.as_str();
    std::thread::scope(|scope| {
        for _ in 0..config.workers.min(instances.len().max(1)) {
            let tx = tx.clone();
            scope.spawn(move || loop {
                let i = next_ref.fetch_add(1, Ordering::Relaxed);
                let Some(instance) = instances_ref.get(i) else {
                    break;
                };
                let Some(schema) = benchmark_ref.schema_for(&instance.db_id) else {
                    log::error!("no schema for {}", instance.db_id);
                    break;
                };
                let shots: Vec<Shot> =
                    selector::select_shots(&instance.question, pool_ref, run_config_ref.k_shots)
                        .into_iter()
                        .map(|(question, sql)| Shot { question, sql })
                        .collect();
                let client = backend_ref.for_instance();
                let runner = Runner {
                    client: &client,
                    catalog: &benchmark_ref.catalog,
                    config: run_config_ref,
                    model_name: model,
                };
                let record = runner.run(instance, schema, &shots);
                let _ = tx.send(record);
            });
        }
        drop(tx);
    });
    let mut records: Vec<RunRecord> = rx.into_iter().collect();
    records.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));

    // Score in-process so the summary can never drift from the evaluator.
    let have_gold = records.iter().all(|r| r.gold_sql.is_some());
    let accuracy = if have_gold && !records.is_empty() {
        let scored = evaluator::score_records(
            &records,
            &benchmark.catalog,
            run_config.sql_timeout,
        )?;
        for (record, s) in records.iter_mut().zip(&scored) {
            record.outcome = Some(evaluator::verdict_outcome(&s.verdict));
        }
        let hits = scored.iter().filter(|s| s.verdict.matched).count();
        Some(hits as f64 / scored.len() as f64)
    } else {
        None
    };

    let records_path = config.out_dir.join("records.jsonl");
    write_records(&records_path, &records)?;

    let mut terminations = BTreeMap::new();
    for r in &records {
        *terminations
            .entry(termination_key(r.termination).to_string())
            .or_insert(0) += 1;
    }
    let n = records.len().max(1) as f64;
    let summary = BatchSummary {
        instances: records.len(),
        accuracy,
        terminations,
        mean_review_turns: records.iter().map(|r| r.review_turns_used).sum::<usize>() as f64 / n,
        mean_debug_turns: records.iter().map(|r| r.debug_turns_used).sum::<usize>() as f64 / n,
        total_llm_calls: records.iter().map(|r| r.llm_calls).sum(),
        client_errors: records
            .iter()
            .filter(|r| r.termination == Termination::ClientError)
            .count(),
        records_path,
    };
    std::fs::write(
        config.out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

fn load_benchmark_logged(manifest: &BenchmarkManifest) -> anyhow::Result<LoadedBenchmark> {
    let benchmark = datasets::load_benchmark(manifest)?;
    log::info!(
        "loaded {}: {} instances, {} schemas",
        manifest.name,
        benchmark.instances.len(),
        benchmark.schemas.len()
    );
    Ok(benchmark)
}

fn write_records(path: &Path, records: &[RunRecord]) -> anyhow::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut f, record)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> anyhow::Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read records {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).context("invalid record line"))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub scored: Vec<ScoredRecord>,
    pub per_difficulty: BTreeMap<String, (usize, f64)>,
    pub error_report: Option<evaluator::ErrorReport>,
    /// (U, p) over per-fold accuracies when a comparison file is given.
    pub significance: Option<(f64, f64)>,
}

/// Score a records file, optionally aggregate an error-label annotation
/// file, and optionally compare against a second records file with a
/// fold-level Mann-Whitney U test. Writes `report.md` and `report.json`
/// into the output directory.
pub fn cmd_eval(
    config: &CliConfig,
    records_path: &Path,
    labels_path: Option<&Path>,
    compare_path: Option<&Path>,
    folds: usize,
) -> anyhow::Result<EvalReport> {
    let manifest = config.manifest()?;
    let benchmark = load_benchmark_logged(&manifest)?;
    let timeout = Duration::from_millis(config.sql_timeout_ms);
    let records = read_records(records_path)?;
    let known: std::collections::BTreeSet<&str> =
        benchmark.instances.iter().map(|i| i.id.as_str()).collect();
    for r in &records {
        if !known.contains(r.instance_id.as_str()) {
            bail!("record `{}` does not appear in the manifest", r.instance_id);
        }
    }
    let scored = evaluator::score_records(&records, &benchmark.catalog, timeout)?;
    let hits = scored.iter().filter(|s| s.verdict.matched).count();
    let accuracy = hits as f64 / scored.len() as f64;

    let mut per_difficulty: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let difficulty_of: BTreeMap<&str, &str> = benchmark
        .instances
        .iter()
        .filter_map(|i| Some((i.id.as_str(), i.difficulty.as_deref()?)))
        .collect();
    for s in &scored {
        if let Some(d) = difficulty_of.get(s.instance_id.as_str()) {
            let entry = per_difficulty.entry(d.to_string()).or_insert((0, 0));
            entry.0 += 1;
            entry.1 += usize::from(s.verdict.matched);
        }
    }
    let per_difficulty: BTreeMap<String, (usize, f64)> = per_difficulty
        .into_iter()
        .map(|(d, (n, hits))| (d, (n, hits as f64 / n as f64)))
        .collect();

    let error_report = match labels_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read labels {}", path.display()))?;
            let labels: BTreeMap<String, String> = serde_json::from_str(&text)?;
            Some(evaluator::error_report(
                &evaluator::outcome_map(&scored),
                &labels,
            )?)
        }
        None => None,
    };

    let significance = match compare_path {
        Some(path) => {
            let other = read_records(path)?;
            let other_scored =
                evaluator::score_records(&other, &benchmark.catalog, timeout)?;
            let a: Vec<f64> = evaluator::fold_accuracies(&scored, folds)?
                .into_iter()
                .map(|f| f.accuracy)
                .collect();
            let b: Vec<f64> = evaluator::fold_accuracies(&other_scored, folds)?
                .into_iter()
                .map(|f| f.accuracy)
                .collect();
            Some(evaluator::mann_whitney_u(&a, &b)?)
        }
        None => None,
    };

    let report = EvalReport {
        accuracy,
        scored,
        per_difficulty,
        error_report,
        significance,
    };
    std::fs::create_dir_all(&config.out_dir)?;
    std::fs::write(
        config.out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    std::fs::write(config.out_dir.join("report.md"), render_report(&report))?;
    Ok(report)
}

fn render_report(report: &EvalReport) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(out, "# Evaluation report\n");
    let _ = writeln!(
        out,
        "Execution accuracy: **{:.1}%** ({} instances)\n",
        report.accuracy * 100.0,
        report.scored.len()
    );
    if !report.per_difficulty.is_empty() {
        let _ = writeln!(out, "| Difficulty | Instances | Accuracy |\n|---|---|---|");
        for (d, (n, acc)) in &report.per_difficulty {
            let _ = writeln!(out, "| {d} | {n} | {:.1}% |", acc * 100.0);
        }
        out.push('\n');
    }
    if let Some(er) = &report.error_report {
        let _ = writeln!(out, "## Error analysis\n\n{}", er.to_markdown());
    }
    if let Some((u, p)) = report.significance {
        let _ = writeln!(
            out,
            "## Significance\n\nMann-Whitney U over fold accuracies: U = {u}, two-sided p = {p:.4}"
        );
    }
    out
}

/// Axes the sweep command can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    KShots,
    NReviewers,
    Mode,
}

impl SweepAxis {
    pub fn parse(s: &str) -> anyhow::Result<Self> {
        match s {
            "k_shots" => Ok(SweepAxis::KShots),
            "n_reviewers" => Ok(SweepAxis::NReviewers),
            "mode" => Ok(SweepAxis::Mode),
            other => bail!("unknown sweep axis `{other}`"),
        }
    }
}

fn sweep_row_label(axis: SweepAxis, value: &str, config: &CliConfig) -> String {
    match axis {
        SweepAxis::KShots => format!("k={value}"),
        SweepAxis::NReviewers => format!("{value}R-Lp + {}", mode_label(&config.mode)),
        SweepAxis::Mode => mode_label(value).to_string(),
    }
}

fn mode_label(mode: &str) -> &'static str {
    match mode {
        "cot" => "CoT",
        _ => "PoT",
    }
}

/// Run the batch once per axis value and emit a markdown ablation table
/// (`sweep.md` in the output directory).
pub fn cmd_sweep(
    config: &CliConfig,
    axis: SweepAxis,
    values: &[String],
) -> anyhow::Result<String> {
    if values.is_empty() {
        bail!("sweep requires at least one value");
    }
    let mut table = String::from("| Config | Accuracy | Mean review turns | LLM calls |\n|---|---|---|---|\n");
    for value in values {
        let mut step = config.clone();
        match axis {
            SweepAxis::KShots => step.k_shots = value.parse().context("k_shots value")?,
            SweepAxis::NReviewers => {
                step.n_reviewers = value.parse().context("n_reviewers value")?
            }
            SweepAxis::Mode => step.mode = value.clone(),
        }
        step.out_dir = config.out_dir.join(format!("{:?}-{value}", axis).to_lowercase());
        let summary = cmd_run(&step)?;
        let accuracy = summary
            .accuracy
            .map(|a| format!("{:.1}%", a * 100.0))
            .unwrap_or_else(|| "n/a".into());
        use std::fmt::Write as _;
        let _ = writeln!(
            table,
            "| {} | {} | {:.2} | {} |",
            sweep_row_label(axis, value, config),
            accuracy,
            summary.mean_review_turns,
            summary.total_llm_calls
        );
    }
    std::fs::create_dir_all(&config.out_dir)?;
    std::fs::write(config.out_dir.join("sweep.md"), &table)?;
    Ok(table)
}
