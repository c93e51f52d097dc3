//! Shared domain types. No I/O lives here.
//!
//! Everything in this module is an immutable-after-construction value that is
//! safe to move between worker threads. [`DialogueHistory`] is the one
//! mutable structure and is only ever owned by a single run.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// One benchmark question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<String>,
    pub db_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_sql: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<String>,
}

/// A column of a table: name, declared type, primary-key flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    pub decl_type: String,
    pub is_primary_key: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub columns: Vec<ColumnDef>,
}

/// A foreign-key edge between two `table.column` endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForeignKey {
    pub from_table: String,
    pub from_column: String,
    pub to_table: String,
    pub to_column: String,
}

/// Relational schema of one benchmark database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatabaseSchema {
    pub db_id: String,
    pub tables: Vec<TableDef>,
    pub foreign_keys: Vec<ForeignKey>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SchemaError {
    #[error("duplicate table name `{0}`")]
    DuplicateTable(String),
    #[error("foreign key endpoint `{0}.{1}` does not name an existing column")]
    DanglingForeignKey(String, String),
}

impl DatabaseSchema {
    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// Check the structural invariants: unique table names and resolvable
    /// foreign-key endpoints.
    pub fn validate(&self) -> Result<(), SchemaError> {
        let mut seen = std::collections::HashSet::new();
        for t in &self.tables {
            if !seen.insert(&t.name) {
                return Err(SchemaError::DuplicateTable(t.name.clone()));
            }
        }
        for fk in &self.foreign_keys {
            for (t, c) in [
                (&fk.from_table, &fk.from_column),
                (&fk.to_table, &fk.to_column),
            ] {
                let ok = self
                    .table(t)
                    .map(|td| td.columns.iter().any(|col| &col.name == c))
                    .unwrap_or(false);
                if !ok {
                    return Err(SchemaError::DanglingForeignKey(t.clone(), c.clone()));
                }
            }
        }
        Ok(())
    }
}

/// A SQL query together with its normalized form.
///
/// The normalized text is what consensus and repetition checks compare; it is
/// a pure function of the raw text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqlQuery {
    pub raw: String,
    pub normalized: String,
}

impl SqlQuery {
    pub fn new(raw: impl Into<String>) -> Self {
        let raw = raw.into();
        let normalized = normalize_sql(&raw);
        Self { raw, normalized }
    }

    /// Consensus equality: two queries agree when their normalized forms are
    /// byte-equal.
    pub fn agrees_with(&self, other: &SqlQuery) -> bool {
        self.normalized == other.normalized
    }
}

impl fmt::Display for SqlQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

/// Deterministic token-count proxy: `ceil(byte_length / 4)`.
pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

/// Lexically normalize a SQL query: lowercase everything outside quoted
/// literals, strip `--` line comments, collapse whitespace runs to one space,
/// and drop a trailing semicolon. Quoted literals are preserved byte-exactly.
///
/// If a quote never closes, normalization falls back to whitespace collapse
/// only and the result is flagged.
pub fn normalize_sql_flagged(raw: &str) -> (String, bool) {
    // First pass: verify every quote closes. SQL doubles quotes to escape
    // them, which this scan handles naturally (each pair closes and reopens).
    let mut chars = raw.chars().peekable();
    let mut terminated = true;
    while let Some(c) = chars.next() {
        if c == '\'' || c == '"' || c == '`' {
            let mut closed = false;
            for d in chars.by_ref() {
                if d == c {
                    closed = true;
                    break;
                }
            }
            if !closed {
                terminated = false;
                break;
            }
        }
    }
    if !terminated {
        let collapsed = collapse_ws(raw);
        return (collapsed, true);
    }

    let mut out = String::with_capacity(raw.len());
    let mut chars = raw.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\'' | '"' | '`' => {
                out.push(c);
                for d in chars.by_ref() {
                    out.push(d);
                    if d == c {
                        break;
                    }
                }
            }
            '-' if chars.peek() == Some(&'-') => {
                // Line comment: skip to end of line, leaving one space.
                for d in chars.by_ref() {
                    if d == '\n' {
                        break;
                    }
                }
                if !out.ends_with(' ') {
                    out.push(' ');
                }
            }
            c if c.is_whitespace() => {
                if !out.ends_with(' ') {
                    out.push(' ');
                }
            }
            c => out.extend(c.to_lowercase()),
        }
    }
    let mut out = out.trim().to_string();
    while out.ends_with(';') {
        out.pop();
        out = out.trim_end().to_string();
    }
    (out, false)
}

/// [`normalize_sql_flagged`] without the unterminated-string flag.
pub fn normalize_sql(raw: &str) -> String {
    normalize_sql_flagged(raw).0
}

fn collapse_ws(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut in_ws = false;
    for c in s.chars() {
        if c.is_whitespace() {
            in_ws = true;
        } else {
            if in_ws && !out.is_empty() {
                out.push(' ');
            }
            in_ws = false;
            out.push(c);
        }
    }
    out
}

/// One cell of an execution result. Mirrors the five SQLite storage classes;
/// blobs are carried as raw bytes and rendered as hex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "t", content = "v")]
pub enum CellValue {
    Null,
    Int(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl fmt::Display for CellValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellValue::Null => f.write_str("NULL"),
            CellValue::Int(v) => write!(f, "{v}"),
            CellValue::Real(v) => write!(f, "{v}"),
            CellValue::Text(v) => f.write_str(v),
            CellValue::Blob(v) => write!(f, "x'{}'", hex::encode(v)),
        }
    }
}

/// Rectangular execution result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<CellValue>>,
    /// Set when the producer capped the row count.
    pub truncated: bool,
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("row {row} has {got} cells, expected {expected}")]
pub struct RaggedRow {
    pub row: usize,
    pub got: usize,
    pub expected: usize,
}

impl ResultTable {
    pub fn new(columns: Vec<String>, rows: Vec<Vec<CellValue>>) -> Result<Self, RaggedRow> {
        for (i, r) in rows.iter().enumerate() {
            if r.len() != columns.len() {
                return Err(RaggedRow {
                    row: i,
                    got: r.len(),
                    expected: columns.len(),
                });
            }
        }
        Ok(Self {
            columns,
            rows,
            truncated: false,
        })
    }

    pub fn empty(columns: Vec<String>) -> Self {
        Self {
            columns,
            rows: Vec::new(),
            truncated: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// Who produced a message, beyond the wire-level role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Author {
    Writer,
    Reviewer(usize),
    Environment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentMessage {
    pub role: Role,
    pub author: Author,
    pub content: String,
    pub token_estimate: usize,
}

impl AgentMessage {
    pub fn new(role: Role, author: Author, content: impl Into<String>) -> Self {
        let content = content.into();
        let token_estimate = estimate_tokens(&content).max(usize::from(!content.is_empty()));
        Self {
            role,
            author,
            content,
            token_estimate,
        }
    }
}

/// Ordered dialogue history with a token budget.
///
/// The budget is enforced by `prompts::truncate_history`, which the run
/// invokes after appends; the first user message (question + schema) is never
/// evicted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueHistory {
    pub messages: Vec<AgentMessage>,
    pub budget: usize,
}

impl DialogueHistory {
    pub fn new(budget: usize) -> Self {
        Self {
            messages: Vec::new(),
            budget,
        }
    }

    pub fn push(&mut self, msg: AgentMessage) {
        self.messages.push(msg);
    }

    pub fn token_sum(&self) -> usize {
        self.messages.iter().map(|m| m.token_estimate).sum()
    }

    /// Index of the first user message, if any.
    pub fn first_user_index(&self) -> Option<usize> {
        self.messages.iter().position(|m| m.role == Role::User)
    }
}

/// A reviewer identity: short handle plus a generated profession.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewerProfile {
    pub handle: String,
    pub profession: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WriterMode {
    Cot,
    Pot,
}

impl fmt::Display for WriterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WriterMode::Cot => f.write_str("cot"),
            WriterMode::Pot => f.write_str("pot"),
        }
    }
}

/// Knobs of one consensus run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub max_review_turns: usize,
    pub max_debug_turns: usize,
    pub n_reviewers: usize,
    pub k_shots: usize,
    pub mode: WriterMode,
    pub temperature: f64,
    pub history_budget: usize,
    pub render_row_cap: usize,
    #[serde(with = "duration_millis")]
    pub sql_timeout: Duration,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            max_review_turns: 3,
            max_debug_turns: 3,
            n_reviewers: 3,
            k_shots: 5,
            mode: WriterMode::Pot,
            temperature: 0.0,
            history_budget: 8192,
            render_row_cap: 50,
            sql_timeout: Duration::from_secs(10),
        }
    }
}

mod duration_millis {
    use super::Duration;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        (d.as_millis() as u64).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// Why a run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Consensus,
    ReviewCap,
    DebugExhausted,
    ClientError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Correct,
    Incorrect,
    Nonexecutable,
}

/// Full transcript and counters of one run; one JSON-lines entry per
/// instance in the batch output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub instance_id: String,
    pub db_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_sql: Option<String>,
    pub transcript: DialogueHistory,
    pub debug_turns_used: usize,
    pub review_turns_used: usize,
    pub final_sql: SqlQuery,
    pub termination: Termination,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Outcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_label: Option<String>,
    /// Free-form annotations (e.g. transpiled SQL, unparseable rebuttals).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, String>,
    pub llm_calls: usize,
}
