//! C ABI for the text-to-SQL engine's embeddable pieces: SQL
//! normalization and extraction, the read-only execution sandbox, result
//! tables, and the Mann-Whitney U test.
//!
//! Conventions: handles are opaque pointers created and destroyed by this
//! library; functions return a `QsStatus` error code and write outputs
//! through pointers; every returned string is owned by the caller and must
//! be released with `qs_string_free`. All functions are panic-safe (a panic
//! maps to `QS_ERR_INTERNAL`).

use std::ffi::{c_char, c_double, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Duration;

use quorum_sql::evaluator;
use quorum_sql::prompts;
use quorum_sql::sandbox::{self, DatabaseCatalog, ExecutionOutcome};
use quorum_sql::types::{normalize_sql, ResultTable, SqlQuery};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QsStatus {
    QsOk = 0,
    /// A required pointer argument was null.
    QsErrNullArg = 1,
    /// An input string was not valid UTF-8.
    QsErrUtf8 = 2,
    /// The database id is not registered or the file is unusable.
    QsErrUnknownDb = 3,
    /// The query failed to execute; the engine message is written to the
    /// error output parameter where one is provided.
    QsErrExec = 4,
    /// No SQL could be extracted from the text.
    QsErrNoSql = 5,
    /// A row/column index was out of range.
    QsErrBadIndex = 6,
    /// A sample was empty.
    QsErrEmptySample = 7,
    /// Internal panic; the operation had no effect.
    QsErrInternal = 8,
}

/// Opaque database catalog handle.
pub struct QsCatalog {
    inner: DatabaseCatalog,
}

/// Opaque result table handle.
pub struct QsResultTable {
    inner: ResultTable,
}

fn guard(f: impl FnOnce() -> QsStatus) -> QsStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or(QsStatus::QsErrInternal)
}

/// # Safety
/// `ptr` must be null or a valid NUL-terminated string.
unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, QsStatus> {
    if ptr.is_null() {
        return Err(QsStatus::QsErrNullArg);
    }
    unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| QsStatus::QsErrUtf8)
}

fn give_string(s: String, out: *mut *mut c_char) -> QsStatus {
    if out.is_null() {
        return QsStatus::QsErrNullArg;
    }
    // Interior NULs cannot round-trip through a C string; replace them.
    let cleaned = s.replace('\0', "\u{fffd}");
    let c = CString::new(cleaned).expect("NULs removed");
    unsafe { *out = c.into_raw() };
    QsStatus::QsOk
}

/// Release a string returned by this library. Null is a no-op.
#[no_mangle]
pub extern "C" fn qs_string_free(s: *mut c_char) {
    if !s.is_null() {
        unsafe { drop(CString::from_raw(s)) };
    }
}

/// Normalize a SQL string (lowercase outside literals, collapsed
/// whitespace, trailing semicolon and line comments stripped).
///
/// # Safety
/// `sql` must be a valid NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qs_normalize_sql(sql: *const c_char, out: *mut *mut c_char) -> QsStatus {
    guard(|| {
        let sql = match unsafe { read_str(sql) } {
            Ok(s) => s,
            Err(e) => return e,
        };
        give_string(normalize_sql(sql), out)
    })
}

/// Extract the final SQL query from assistant text (last ```sql fence, else
/// a trailing SELECT/WITH statement).
///
/// # Safety
/// `text` must be a valid NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qs_extract_final_sql(
    text: *const c_char,
    out: *mut *mut c_char,
) -> QsStatus {
    guard(|| {
        let text = match unsafe { read_str(text) } {
            Ok(s) => s,
            Err(e) => return e,
        };
        match prompts::extract_final_sql(text) {
            Ok(query) => give_string(query.raw, out),
            Err(_) => QsStatus::QsErrNoSql,
        }
    })
}

/// Create an empty catalog. Free with `qs_catalog_free`.
#[no_mangle]
pub extern "C" fn qs_catalog_new() -> *mut QsCatalog {
    Box::into_raw(Box::new(QsCatalog {
        inner: DatabaseCatalog::new(),
    }))
}

/// # Safety
/// `catalog` must come from `qs_catalog_new` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn qs_catalog_free(catalog: *mut QsCatalog) {
    if !catalog.is_null() {
        unsafe { drop(Box::from_raw(catalog)) };
    }
}

/// Register a database file under an id; the file must open read-only.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn qs_catalog_add(
    catalog: *mut QsCatalog,
    db_id: *const c_char,
    path: *const c_char,
) -> QsStatus {
    guard(|| {
        let Some(catalog) = (unsafe { catalog.as_mut() }) else {
            return QsStatus::QsErrNullArg;
        };
        let (db_id, path) = match (unsafe { read_str(db_id) }, unsafe { read_str(path) }) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return e,
        };
        match catalog.inner.add(db_id, path) {
            Ok(()) => QsStatus::QsOk,
            Err(_) => QsStatus::QsErrUnknownDb,
        }
    })
}

/// Execute SQL read-only against a registered database. On success writes a
/// table handle (free with `qs_table_free`); on execution failure writes
/// the engine's error message to `error_out` (free with `qs_string_free`)
/// and returns `QS_ERR_EXEC`. `timeout_ms = 0` means no timeout;
/// `row_cap = 0` means unlimited rows.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn qs_execute(
    catalog: *const QsCatalog,
    db_id: *const c_char,
    sql: *const c_char,
    timeout_ms: u64,
    row_cap: usize,
    table_out: *mut *mut QsResultTable,
    error_out: *mut *mut c_char,
) -> QsStatus {
    guard(|| {
        let Some(catalog) = (unsafe { catalog.as_ref() }) else {
            return QsStatus::QsErrNullArg;
        };
        if table_out.is_null() {
            return QsStatus::QsErrNullArg;
        }
        let (db_id, sql) = match (unsafe { read_str(db_id) }, unsafe { read_str(sql) }) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return e,
        };
        let timeout = if timeout_ms == 0 {
            Duration::from_secs(u64::MAX / 1000)
        } else {
            Duration::from_millis(timeout_ms)
        };
        match sandbox::execute(&catalog.inner, db_id, &SqlQuery::new(sql), timeout, row_cap) {
            Ok(ExecutionOutcome::Table(table)) => {
                unsafe {
                    *table_out = Box::into_raw(Box::new(QsResultTable { inner: table }));
                }
                QsStatus::QsOk
            }
            Ok(ExecutionOutcome::Error(err)) => {
                if !error_out.is_null() {
                    give_string(err.message, error_out);
                }
                QsStatus::QsErrExec
            }
            Err(_) => QsStatus::QsErrUnknownDb,
        }
    })
}

/// # Safety
/// `table` must come from `qs_execute` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn qs_table_free(table: *mut QsResultTable) {
    if !table.is_null() {
        unsafe { drop(Box::from_raw(table)) };
    }
}

/// Number of rows; 0 for a null handle.
///
/// # Safety
/// `table` must be null or a valid table handle.
#[no_mangle]
pub unsafe extern "C" fn qs_table_num_rows(table: *const QsResultTable) -> usize {
    unsafe { table.as_ref() }.map_or(0, |t| t.inner.rows.len())
}

/// Number of columns; 0 for a null handle.
///
/// # Safety
/// `table` must be null or a valid table handle.
#[no_mangle]
pub unsafe extern "C" fn qs_table_num_columns(table: *const QsResultTable) -> usize {
    unsafe { table.as_ref() }.map_or(0, |t| t.inner.columns.len())
}

/// 1 when rows were dropped by the row cap, else 0.
///
/// # Safety
/// `table` must be null or a valid table handle.
#[no_mangle]
pub unsafe extern "C" fn qs_table_truncated(table: *const QsResultTable) -> c_int {
    unsafe { table.as_ref() }.map_or(0, |t| c_int::from(t.inner.truncated))
}

/// Column name by index.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn qs_table_column_name(
    table: *const QsResultTable,
    column: usize,
    out: *mut *mut c_char,
) -> QsStatus {
    guard(|| {
        let Some(table) = (unsafe { table.as_ref() }) else {
            return QsStatus::QsErrNullArg;
        };
        match table.inner.columns.get(column) {
            Some(name) => give_string(name.clone(), out),
            None => QsStatus::QsErrBadIndex,
        }
    })
}

/// Cell rendered as text (NULL cells render as `NULL`, blobs as `x'…'`).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn qs_table_cell_text(
    table: *const QsResultTable,
    row: usize,
    column: usize,
    out: *mut *mut c_char,
) -> QsStatus {
    guard(|| {
        let Some(table) = (unsafe { table.as_ref() }) else {
            return QsStatus::QsErrNullArg;
        };
        match table.inner.rows.get(row).and_then(|r| r.get(column)) {
            Some(cell) => give_string(cell.to_string(), out),
            None => QsStatus::QsErrBadIndex,
        }
    })
}

/// Render a table as the aligned text grid used in prompts.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn qs_table_render(
    table: *const QsResultTable,
    max_rows: usize,
    max_cell_chars: usize,
    out: *mut *mut c_char,
) -> QsStatus {
    guard(|| {
        let Some(table) = (unsafe { table.as_ref() }) else {
            return QsStatus::QsErrNullArg;
        };
        give_string(
            sandbox::render_table(&table.inner, max_rows, max_cell_chars),
            out,
        )
    })
}

/// Two-sided Mann-Whitney U test (exact for small samples, normal
/// approximation otherwise). Writes U and p.
///
/// # Safety
/// `a`/`b` must point to `na`/`nb` doubles; `u_out`/`p_out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn qs_mann_whitney_u(
    a: *const c_double,
    na: usize,
    b: *const c_double,
    nb: usize,
    u_out: *mut c_double,
    p_out: *mut c_double,
) -> QsStatus {
    guard(|| {
        if (a.is_null() && na > 0) || (b.is_null() && nb > 0) || u_out.is_null() || p_out.is_null()
        {
            return QsStatus::QsErrNullArg;
        }
        let sa = unsafe { std::slice::from_raw_parts(a, na) };
        let sb = unsafe { std::slice::from_raw_parts(b, nb) };
        match evaluator::mann_whitney_u(sa, sb) {
            Ok((u, p)) => {
                unsafe {
                    *u_out = u;
                    *p_out = p;
                }
                QsStatus::QsOk
            }
            Err(_) => QsStatus::QsErrEmptySample,
        }
    })
}
