//! Read-only SQL execution against benchmark SQLite files, plus the ASCII
//! table renderer used to show results to the agents.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};

use crate::types::{CellValue, ResultTable, SqlQuery};

/// Maps database ids to file paths. Connections are opened per call so that
/// worker threads never share a live handle.
#[derive(Debug, Clone, Default)]
pub struct DatabaseCatalog {
    paths: BTreeMap<String, PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("unknown database id `{0}`")]
    UnknownDb(String),
    #[error("database file for `{id}` not usable: {reason}")]
    Unusable { id: String, reason: String },
}

impl DatabaseCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a database file, verifying it exists and opens read-only.
    pub fn add(&mut self, db_id: impl Into<String>, path: impl Into<PathBuf>) -> Result<(), CatalogError> {
        let id = db_id.into();
        let path = path.into();
        Connection::open_with_flags(&path, OpenFlags::SQLITE_OPEN_READ_ONLY).map_err(|e| {
            CatalogError::Unusable {
                id: id.clone(),
                reason: e.to_string(),
            }
        })?;
        self.paths.insert(id, path);
        Ok(())
    }

    pub fn path(&self, db_id: &str) -> Result<&Path, CatalogError> {
        self.paths
            .get(db_id)
            .map(PathBuf::as_path)
            .ok_or_else(|| CatalogError::UnknownDb(db_id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.paths.keys().map(String::as_str)
    }

    pub fn contains(&self, db_id: &str) -> bool {
        self.paths.contains_key(db_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecErrorKind {
    Syntax,
    MissingObject,
    Type,
    Timeout,
    Other,
}

/// Execution failure with the engine's message verbatim; the message is what
/// gets fed back to the writer agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecError {
    pub kind: ExecErrorKind,
    pub message: String,
}

/// Either a result table or a captured engine error; failures never escape
/// this boundary as Rust errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ExecutionOutcome {
    Table(ResultTable),
    Error(ExecError),
}

impl ExecutionOutcome {
    pub fn table(&self) -> Option<&ResultTable> {
        match self {
            ExecutionOutcome::Table(t) => Some(t),
            ExecutionOutcome::Error(_) => None,
        }
    }

    pub fn error(&self) -> Option<&ExecError> {
        match self {
            ExecutionOutcome::Table(_) => None,
            ExecutionOutcome::Error(e) => Some(e),
        }
    }
}

fn classify(message: &str) -> ExecErrorKind {
    let lower = message.to_lowercase();
    if lower.contains("interrupted") {
        ExecErrorKind::Timeout
    } else if lower.contains("syntax error") || lower.contains("incomplete input") {
        ExecErrorKind::Syntax
    } else if lower.contains("no such table")
        || lower.contains("no such column")
        || lower.contains("no such function")
    {
        ExecErrorKind::MissingObject
    } else if lower.contains("datatype mismatch") || lower.contains("could not convert") {
        ExecErrorKind::Type
    } else {
        ExecErrorKind::Other
    }
}

/// Execute SQL read-only with a wall-clock timeout and a row cap.
///
/// `row_cap = 0` means unlimited (the evaluator compares full results). On
/// success the table carries at most `row_cap` rows, with `truncated` set
/// when rows were dropped.
pub fn execute(
    catalog: &DatabaseCatalog,
    db_id: &str,
    sql: &SqlQuery,
    timeout: Duration,
    row_cap: usize,
) -> Result<ExecutionOutcome, CatalogError> {
    let path = catalog.path(db_id)?;
    Ok(execute_at(path, sql, timeout, row_cap))
}

/// Same as [`execute`] but addressed by file path.
pub fn execute_at(
    path: &Path,
    sql: &SqlQuery,
    timeout: Duration,
    row_cap: usize,
) -> ExecutionOutcome {
    let conn = match Connection::open_with_flags(path, OpenFlags::SQLITE_OPEN_READ_ONLY) {
        Ok(c) => c,
        Err(e) => {
            return ExecutionOutcome::Error(ExecError {
                kind: ExecErrorKind::Other,
                message: e.to_string(),
            })
        }
    };
    let started = Instant::now();
    conn.progress_handler(1000, Some(move || started.elapsed() > timeout));
    run_query(&conn, sql, row_cap)
}

fn run_query(conn: &Connection, sql: &SqlQuery, row_cap: usize) -> ExecutionOutcome {
    let mut stmt = match conn.prepare(&sql.raw) {
        Ok(s) => s,
        Err(e) => {
            let message = e.to_string();
            return ExecutionOutcome::Error(ExecError {
                kind: classify(&message),
                message,
            });
        }
    };
    let columns: Vec<String> = stmt.column_names().iter().map(|s| s.to_string()).collect();
    let ncols = columns.len();
    let mut rows_out: Vec<Vec<CellValue>> = Vec::new();
    let mut truncated = false;
    let mut rows = match stmt.query([]) {
        Ok(r) => r,
        Err(e) => {
            let message = e.to_string();
            return ExecutionOutcome::Error(ExecError {
                kind: classify(&message),
                message,
            });
        }
    };
    loop {
        match rows.next() {
            Ok(Some(row)) => {
                if row_cap > 0 && rows_out.len() == row_cap {
                    truncated = true;
                    break;
                }
                let mut cells = Vec::with_capacity(ncols);
                for i in 0..ncols {
                    let value = match row.get_ref(i) {
                        Ok(v) => v,
                        Err(e) => {
                            let message = e.to_string();
                            return ExecutionOutcome::Error(ExecError {
                                kind: classify(&message),
                                message,
                            });
                        }
                    };
                    cells.push(match value {
                        rusqlite::types::ValueRef::Null => CellValue::Null,
                        rusqlite::types::ValueRef::Integer(v) => CellValue::Int(v),
                        rusqlite::types::ValueRef::Real(v) => CellValue::Real(v),
                        rusqlite::types::ValueRef::Text(t) => {
                            CellValue::Text(String::from_utf8_lossy(t).into_owned())
                        }
                        rusqlite::types::ValueRef::Blob(b) => CellValue::Blob(b.to_vec()),
                    });
                }
                rows_out.push(cells);
            }
            Ok(None) => break,
            Err(e) => {
                let message = e.to_string();
                return ExecutionOutcome::Error(ExecError {
                    kind: classify(&message),
                    message,
                });
            }
        }
    }
    let mut table = ResultTable::new(columns, rows_out).expect("rows are rectangular");
    table.truncated = truncated;
    ExecutionOutcome::Table(table)
}

/// Render a table as a fixed-width ASCII grid: header, separator, rows, and
/// a row-count footer. Deterministic bytes; constant line width per table.
pub fn render_table(table: &ResultTable, max_rows: usize, max_cell_chars: usize) -> String {
    let shown = if max_rows > 0 {
        table.rows.len().min(max_rows)
    } else {
        table.rows.len()
    };
    let elide = |s: &str| -> String {
        if max_cell_chars > 0 && s.chars().count() > max_cell_chars {
            let truncated: String = s.chars().take(max_cell_chars.saturating_sub(1)).collect();
            format!("{truncated}\u{2026}")
        } else {
            s.to_string()
        }
    };
    let mut cells: Vec<Vec<String>> = Vec::with_capacity(shown + 1);
    cells.push(table.columns.iter().map(|c| elide(c)).collect());
    for row in table.rows.iter().take(shown) {
        cells.push(row.iter().map(|c| elide(&c.to_string())).collect());
    }
    let ncols = table.columns.len();
    let mut widths = vec![0usize; ncols];
    for row in &cells {
        for (i, c) in row.iter().enumerate() {
            widths[i] = widths[i].max(c.chars().count());
        }
    }
    let mut out = String::new();
    for (ri, row) in cells.iter().enumerate() {
        out.push('|');
        for (i, c) in row.iter().enumerate() {
            let pad = widths[i] - c.chars().count();
            out.push(' ');
            out.push_str(c);
            out.push_str(&" ".repeat(pad + 1));
            out.push('|');
        }
        out.push('\n');
        if ri == 0 {
            out.push('|');
            for w in &widths {
                out.push_str(&"-".repeat(w + 2));
                out.push('|');
            }
            out.push('\n');
        }
    }
    if ncols == 0 {
        out.push_str("(no columns)\n");
    }
    let total = table.rows.len();
    if shown < total {
        out.push_str(&format!("(showing {shown} of {total} rows)"));
    } else {
        match total {
            1 => out.push_str("(1 row)"),
            n => out.push_str(&format!("({n} rows)")),
        }
    }
    out
}
