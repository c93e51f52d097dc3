//! Spider/Bird benchmark loading: questions JSON, schema (tables) JSON, and
//! per-database SQLite files, cross-validated into task instances, schemas,
//! and a database catalog.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::sandbox::{self, DatabaseCatalog};
use crate::types::{ColumnDef, DatabaseSchema, ForeignKey, SqlQuery, TableDef, TaskInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Dev,
    Test,
    Train,
}

/// Where one benchmark lives on disk. Databases are expected at
/// `{database_root}/{db_id}/{db_id}.sqlite`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub name: String,
    pub questions: PathBuf,
    pub tables: PathBuf,
    pub database_root: PathBuf,
    pub split: Split,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed record {index}: {reason}")]
    MalformedRecord { index: usize, reason: String },
    #[error("question references db_id `{0}` with no schema entry or database file")]
    SchemaQuestionMismatch(String),
    #[error("subsample size {n} exceeds instance count {count}")]
    NTooLarge { n: usize, count: usize },
}

/// Everything a batch run needs from one benchmark directory.
#[derive(Debug)]
pub struct LoadedBenchmark {
    pub instances: Vec<TaskInstance>,
    pub schemas: Vec<DatabaseSchema>,
    pub catalog: DatabaseCatalog,
}

impl LoadedBenchmark {
    pub fn schema_for(&self, db_id: &str) -> Option<&DatabaseSchema> {
        self.schemas.iter().find(|s| s.db_id == db_id)
    }
}

// ---------------------------------------------------------------------------
// Question files
// ---------------------------------------------------------------------------

/// One raw question record. Spider uses `query`; Bird uses `SQL`, adds
/// `evidence` and `difficulty`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawQuestion {
    pub question: String,
    pub db_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    #[serde(default, rename = "SQL", skip_serializing_if = "Option::is_none")]
    pub sql: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_id: Option<u64>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| DatasetError::MalformedRecord {
        index: 0,
        reason: format!("{}: {e}", path.display()),
    })
}

fn instance_from_raw(
    manifest: &BenchmarkManifest,
    index: usize,
    raw: &RawQuestion,
) -> Result<TaskInstance, DatasetError> {
    let gold = raw.sql.clone().or_else(|| raw.query.clone());
    if raw.question.trim().is_empty() {
        return Err(DatasetError::MalformedRecord {
            index,
            reason: "empty question".to_string(),
        });
    }
    let id = match raw.question_id {
        Some(qid) => format!("{}-{qid}", manifest.name),
        None => format!("{}-{index:04}", manifest.name),
    };
    Ok(TaskInstance {
        id,
        question: raw.question.clone(),
        evidence: raw.evidence.clone(),
        db_id: raw.db_id.clone(),
        gold_sql: gold,
        difficulty: raw.difficulty.clone(),
    })
}

/// Re-serialize instances to the benchmark JSON shape (Spider's `query` or
/// Bird's `SQL`, chosen by whether evidence is present), so loader output
/// can round-trip.
pub fn to_benchmark_json(instances: &[TaskInstance]) -> Vec<RawQuestion> {
    instances
        .iter()
        .map(|i| {
            let bird = i.evidence.is_some();
            RawQuestion {
                question: i.question.clone(),
                db_id: i.db_id.clone(),
                query: if bird { None } else { i.gold_sql.clone() },
                sql: if bird { i.gold_sql.clone() } else { None },
                evidence: i.evidence.clone(),
                difficulty: i.difficulty.clone(),
                question_id: None,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Schema (tables) files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
struct RawSchema {
    db_id: String,
    table_names_original: Vec<String>,
    /// Pairs of (table index, column name); the first entry is `[-1, "*"]`.
    column_names_original: Vec<(i64, String)>,
    #[serde(default)]
    column_types: Vec<String>,
    #[serde(default)]
    primary_keys: Vec<serde_json::Value>,
    #[serde(default)]
    foreign_keys: Vec<(usize, usize)>,
}

fn schema_from_raw(raw: &RawSchema, index: usize) -> Result<DatabaseSchema, DatasetError> {
    let malformed = |reason: String| DatasetError::MalformedRecord { index, reason };
    let mut tables: Vec<TableDef> = raw
        .table_names_original
        .iter()
        .map(|name| TableDef {
            name: name.clone(),
            columns: Vec::new(),
        })
        .collect();
    // Primary keys can be plain indices or (rarely) composite lists.
    let mut pk_columns: BTreeSet<usize> = BTreeSet::new();
    for v in &raw.primary_keys {
        match v {
            serde_json::Value::Number(n) => {
                pk_columns.insert(n.as_u64().ok_or_else(|| {
                    malformed(format!("bad primary key index {n} in {}", raw.db_id))
                })? as usize);
            }
            serde_json::Value::Array(items) => {
                for item in items {
                    if let Some(n) = item.as_u64() {
                        pk_columns.insert(n as usize);
                    }
                }
            }
            other => return Err(malformed(format!("bad primary key entry {other}"))),
        }
    }
    // Map flat column index -> (table index, column name) skipping "*".
    let mut col_owner: Vec<Option<(usize, String)>> = Vec::new();
    for (ci, (ti, name)) in raw.column_names_original.iter().enumerate() {
        if *ti < 0 {
            col_owner.push(None);
            continue;
        }
        let ti = *ti as usize;
        if ti >= tables.len() {
            return Err(malformed(format!(
                "column `{name}` references table index {ti} out of range in {}",
                raw.db_id
            )));
        }
        let decl_type = raw
            .column_types
            .get(ci)
            .cloned()
            .unwrap_or_else(|| "text".to_string());
        tables[ti].columns.push(ColumnDef {
            name: name.clone(),
            decl_type,
            is_primary_key: pk_columns.contains(&ci),
        });
        col_owner.push(Some((ti, name.clone())));
    }
    let mut foreign_keys = Vec::new();
    for (from, to) in &raw.foreign_keys {
        let resolve = |ci: usize| -> Result<(usize, String), DatasetError> {
            col_owner
                .get(ci)
                .and_then(|o| o.clone())
                .ok_or_else(|| malformed(format!("foreign key column index {ci} out of range")))
        };
        let (ft, fc) = resolve(*from)?;
        let (tt, tc) = resolve(*to)?;
        foreign_keys.push(ForeignKey {
            from_table: tables[ft].name.clone(),
            from_column: fc,
            to_table: tables[tt].name.clone(),
            to_column: tc,
        });
    }
    Ok(DatabaseSchema {
        db_id: raw.db_id.clone(),
        tables,
        foreign_keys,
    })
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

/// Load a benchmark directory: parse questions and schemas, register every
/// referenced database file, and cross-validate that each question's db_id
/// has both a schema entry and a usable database.
pub fn load_benchmark(manifest: &BenchmarkManifest) -> Result<LoadedBenchmark, DatasetError> {
    let raw_questions: Vec<RawQuestion> = read_json(&manifest.questions)?;
    let raw_schemas: Vec<RawSchema> = read_json(&manifest.tables)?;
    let mut schemas = Vec::with_capacity(raw_schemas.len());
    for (i, raw) in raw_schemas.iter().enumerate() {
        schemas.push(schema_from_raw(raw, i)?);
    }
    let schema_ids: BTreeSet<&str> = schemas.iter().map(|s| s.db_id.as_str()).collect();

    let mut instances = Vec::with_capacity(raw_questions.len());
    let mut catalog = DatabaseCatalog::new();
    for (i, raw) in raw_questions.iter().enumerate() {
        let instance = instance_from_raw(manifest, i, raw)?;
        if !schema_ids.contains(instance.db_id.as_str()) {
            return Err(DatasetError::SchemaQuestionMismatch(instance.db_id));
        }
        if !catalog.contains(&instance.db_id) {
            let path = manifest
                .database_root
                .join(&instance.db_id)
                .join(format!("{}.sqlite", instance.db_id));
            catalog
                .add(&instance.db_id, &path)
                .map_err(|_| DatasetError::SchemaQuestionMismatch(instance.db_id.clone()))?;
        }
        instances.push(instance);
    }
    Ok(LoadedBenchmark {
        instances,
        schemas,
        catalog,
    })
}

/// Execute every gold query; return human-readable warnings for the ones
/// that fail. Gold errors are documented benchmark defects, so this reports
/// rather than fails.
pub fn gold_warnings(
    instances: &[TaskInstance],
    catalog: &DatabaseCatalog,
    timeout: Duration,
) -> Vec<String> {
    let mut warnings = Vec::new();
    for instance in instances {
        let Some(gold) = &instance.gold_sql else {
            warnings.push(format!("{}: no gold SQL", instance.id));
            continue;
        };
        match sandbox::execute(catalog, &instance.db_id, &SqlQuery::new(gold), timeout, 1) {
            Ok(outcome) => {
                if let Some(err) = outcome.error() {
                    warnings.push(format!("{}: gold SQL fails: {}", instance.id, err.message));
                }
            }
            Err(e) => warnings.push(format!("{}: {e}", instance.id)),
        }
    }
    warnings
}

// ---------------------------------------------------------------------------
// Subsampling
// ---------------------------------------------------------------------------

/// Multiplier/increment of the pinned 64-bit linear congruential generator
/// (Knuth's MMIX constants); pinned so seeded subsamples are identical
/// across platforms and languages.
pub const LCG_MULTIPLIER: u64 = 6364136223846793005;
pub const LCG_INCREMENT: u64 = 1442695040888963407;

struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> u64 {
        self.0 = self
            .0
            .wrapping_mul(LCG_MULTIPLIER)
            .wrapping_add(LCG_INCREMENT);
        self.0
    }

    /// Uniform draw in [0, bound) from the generator's high bits.
    fn below(&mut self, bound: u64) -> u64 {
        ((self.next() >> 32) * bound) >> 32
    }
}

/// Deterministic sample of `n` instances without replacement: a seeded
/// Fisher-Yates shuffle (high-to-low) over a copy, truncated to `n`.
pub fn subsample(
    instances: &[TaskInstance],
    n: usize,
    seed: u64,
) -> Result<Vec<TaskInstance>, DatasetError> {
    if n > instances.len() {
        return Err(DatasetError::NTooLarge {
            n,
            count: instances.len(),
        });
    }
    let mut pool: Vec<TaskInstance> = instances.to_vec();
    let mut rng = Lcg(seed);
    for i in (1..pool.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        pool.swap(i, j);
    }
    pool.truncate(n);
    Ok(pool)
}
