//! Acceptance gate: one test per criterion, each printing a single
//! `ACCEPTANCE <n> (<name>): PASS` line (visible with `--nocapture`).
//!
//! Criteria 8 and 9 need external resources (benchmark directories, a live
//! chat endpoint); they print `SKIP` with instructions when the governing
//! environment variables are unset, so the suite stays green in CI.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use quorum_sql::datasets::{self, BenchmarkManifest, Split};
use quorum_sql::evaluator::{self, VerdictReason};
use quorum_sql::llm::{ChatBackend, HttpBackend, MockScript};
use quorum_sql::orchestrator::Runner;
use quorum_sql::prompts::{self, Bindings, TemplateName};
use quorum_sql::sandbox::{self, DatabaseCatalog};
use quorum_sql::transpiler::{
    self, AggFunc, CmpOp, CodeBlockProgram, Comparison, DslExpr, Literal, MergeHow, Step,
};
use quorum_sql::types::{
    AgentMessage, Author, CellValue, ColumnDef, DatabaseSchema, DialogueHistory, ForeignKey,
    ResultTable, Role, RunConfig, RunRecord, SqlQuery, TableDef, Termination, WriterMode,
};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use tempfile::TempDir;

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

const PANEL_JSON: &str = "```json\n{\n  \"Reviewer PVsg\": \"Data Analyst in automotive industry\",\n  \"Reviewer 2KtR\": \"Senior Database Engineer specialized in writing various clauses\",\n  \"Reviewer LmN3\": \"Senior Database Engineer specialized in writing filtering conditions\"\n}\n```";

/// A one-table database (`singer(id, name)` with two rows) plus its schema
/// and a task instance asking for all names.
fn singer_fixture() -> (TempDir, DatabaseCatalog, DatabaseSchema, quorum_sql::TaskInstance) {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("d.sqlite");
    let conn = rusqlite::Connection::open(&path).unwrap();
    conn.execute_batch(
        "CREATE TABLE singer (id INTEGER PRIMARY KEY, name TEXT);\n\
         INSERT INTO singer VALUES (1, 'A'), (2, 'B');",
    )
    .unwrap();
    drop(conn);
    let mut catalog = DatabaseCatalog::new();
    catalog.add("d", &path).unwrap();
    let schema = DatabaseSchema {
        db_id: "d".into(),
        tables: vec![TableDef {
            name: "singer".into(),
            columns: vec![
                ColumnDef {
                    name: "id".into(),
                    decl_type: "INTEGER".into(),
                    is_primary_key: true,
                },
                ColumnDef {
                    name: "name".into(),
                    decl_type: "TEXT".into(),
                    is_primary_key: false,
                },
            ],
        }],
        foreign_keys: vec![],
    };
    let instance = quorum_sql::TaskInstance {
        id: "i1".into(),
        question: "Show names for all singers.".into(),
        evidence: None,
        db_id: "d".into(),
        gold_sql: Some("SELECT name FROM singer".into()),
        difficulty: None,
    };
    (dir, catalog, schema, instance)
}

fn role_letters(h: &DialogueHistory) -> String {
    h.messages
        .iter()
        .map(|m| match m.role {
            Role::System => 'S',
            Role::User => 'U',
            Role::Assistant => 'A',
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Criterion 1: run-loop trace conformance
// ---------------------------------------------------------------------------

/// Hand-derived traces: call count, call order (enforced by the script's
/// strict expectation cursor), transcript shape, counters, termination.
#[test]
fn acceptance_1_trace_conformance() {
    let started = Instant::now();
    let cfg3 = RunConfig {
        n_reviewers: 3,
        ..RunConfig::default()
    };

    let run = |script: MockScript, cfg: &RunConfig| {
        let (_dir, catalog, schema, instance) = singer_fixture();
        let runner = Runner {
            client: &script,
            catalog: &catalog,
            config: cfg,
            model_name: "mock",
        };
        let record = runner.run(&instance, &schema, &[]);
        (record, script.consumed())
    };

    // 1. Consensus at review turn 1: draft, invite, 3 reviews, repeated SQL.
    let (r, used) = run(
        MockScript::from_pairs(&[
            ("### DATABASE STRUCTURE:", "```sql\nSELECT name FROM singer\n```"),
            ("INVITATION", PANEL_JSON),
            ("### REVIEW:", "looks right"),
            ("### REVIEW:", "looks right"),
            ("### REVIEW:", "looks right"),
            ("Reviewer PVsg", "```sql\nSELECT name FROM singer\n```"),
        ]),
        &cfg3,
    );
    assert_eq!(r.termination, Termination::Consensus);
    assert_eq!((r.llm_calls, used), (6, 6));
    assert_eq!((r.review_turns_used, r.debug_turns_used), (1, 0));
    // Opening, draft, merged reviews, revision — reviewer/invite calls never
    // enter the writer's history.
    assert_eq!(role_letters(&r.transcript), "UAUA");
    assert!(r.transcript.messages[2]
        .content
        .contains("Reviewer PVsg (Data Analyst in automotive industry):"));
    assert_eq!(r.transcript.messages[2].author, Author::Environment);

    // 2. Zero review turns: the debugged draft is final, no panel invited.
    let (r, used) = run(
        MockScript::from_pairs(&[
            ("### DATABASE STRUCTURE:", "```sql\nSELECT nam FROM singer\n```"),
            ("failed to execute", "```sql\nSELECT name FROM singer\n```"),
        ]),
        &RunConfig {
            max_review_turns: 0,
            ..cfg3.clone()
        },
    );
    assert_eq!(r.termination, Termination::ReviewCap);
    assert_eq!((r.llm_calls, used), (2, 2));
    assert_eq!((r.review_turns_used, r.debug_turns_used), (0, 1));
    assert_eq!(role_letters(&r.transcript), "UAUA");

    // 3. Permanent syntax error: draft + 2 corrections, then exhaustion.
    let bad = "```sql\nSELEC name FROM singer\n```";
    let (r, used) = run(
        MockScript::from_pairs(&[("*", bad), ("*", bad), ("*", bad)]),
        &RunConfig {
            max_debug_turns: 2,
            ..cfg3.clone()
        },
    );
    assert_eq!(r.termination, Termination::DebugExhausted);
    assert_eq!((r.llm_calls, used), (3, 3));
    assert_eq!(r.debug_turns_used, 2);
    assert_eq!(role_letters(&r.transcript), "UAUAUA");
    assert!(r.notes.contains_key("last_exec_error"));

    // 4. Alternating writer: three full review turns, then the cap.
    let q1 = "```sql\nSELECT name FROM singer\n```";
    let q2 = "```sql\nSELECT id FROM singer\n```";
    let (r, used) = run(
        MockScript::from_pairs(&[
            ("*", q1),
            ("*", PANEL_JSON),
            ("*", "c"),
            ("*", "c"),
            ("*", "c"),
            ("*", q2),
            ("*", "c"),
            ("*", "c"),
            ("*", "c"),
            ("*", q1),
            ("*", "c"),
            ("*", "c"),
            ("*", "c"),
            ("*", q2),
        ]),
        &cfg3,
    );
    assert_eq!(r.termination, Termination::ReviewCap);
    assert_eq!((r.llm_calls, used), (14, 14));
    assert_eq!(r.review_turns_used, 3);
    assert_eq!(r.final_sql.normalized, "select id from singer");
    assert_eq!(role_letters(&r.transcript), "UAUAUAUA");

    // 5. Invitation fallback: two malformed panel replies, then the built-in
    // default panel reviews and the writer repeats.
    let (r, used) = run(
        MockScript::from_pairs(&[
            ("*", q1),
            ("INVITATION", "no fence"),
            ("INVITATION", "still prose"),
            ("### REVIEW:", "fine"),
            ("### REVIEW:", "fine"),
            ("### REVIEW:", "fine"),
            ("Reviewer R1", q1),
        ]),
        &cfg3,
    );
    assert_eq!(r.termination, Termination::Consensus);
    assert_eq!((r.llm_calls, used), (7, 7));
    assert!(r.transcript.messages[2]
        .content
        .contains("Reviewer R1 (Senior Database Engineer"));

    // 6. Program-of-thoughts fenceless reply: the code block is transpiled.
    let (r, used) = run(
        MockScript::from_pairs(&[(
            "*",
            "```python\nresult = db_dict['singer'][['name']]\n```",
        )]),
        &RunConfig {
            max_review_turns: 0,
            mode: WriterMode::Pot,
            ..cfg3.clone()
        },
    );
    assert_eq!((r.llm_calls, used), (1, 1));
    assert_eq!(r.final_sql.raw, "SELECT T1.name FROM singer AS T1");
    assert_eq!(r.notes.get("transpiled_sql").map(String::as_str), Some("SELECT T1.name FROM singer AS T1"));

    // 7. No extractable SQL in the first reply: the prose executes verbatim,
    // fails, is corrected once, and a single reviewer reaches consensus.
    let (r, used) = run(
        MockScript::from_pairs(&[
            ("*", "I think the answer involves the singer table."),
            ("failed to execute", q1),
            ("INVITATION", PANEL_JSON),
            ("### REVIEW:", "fine"),
            ("Reviewer PVsg", q1),
        ]),
        &RunConfig {
            n_reviewers: 1,
            ..cfg3.clone()
        },
    );
    assert_eq!(r.termination, Termination::Consensus);
    assert_eq!((r.llm_calls, used), (5, 5));
    assert_eq!((r.review_turns_used, r.debug_turns_used), (1, 1));
    assert!(r.notes.contains_key("no_sql_found_initial"));

    // 8. Backend failure mid-run: reviewer calls tolerate errors with a
    // placeholder, but a failed revision call terminates as client_error.
    let (r, _used) = run(
        MockScript::from_pairs(&[
            ("*", q1),
            ("*", PANEL_JSON),
            ("*", "c"),
            ("*", "c"),
            ("*", "c"),
        ]),
        &cfg3,
    );
    assert_eq!(r.termination, Termination::ClientError);
    assert_eq!(r.llm_calls, 6);
    assert!(r.notes.contains_key("client_error"));

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(5), "traces took {elapsed:?}");
    println!("ACCEPTANCE 1 (trace conformance): PASS — 8 scripted traces in {elapsed:?}");
}

// ---------------------------------------------------------------------------
// Criterion 2: consensus and caps with exact counters
// ---------------------------------------------------------------------------

#[test]
fn acceptance_2_consensus_and_caps() {
    let cfg = RunConfig {
        n_reviewers: 3,
        ..RunConfig::default()
    };
    let run = |script: MockScript, cfg: &RunConfig| {
        let (_dir, catalog, schema, instance) = singer_fixture();
        let runner = Runner {
            client: &script,
            catalog: &catalog,
            config: cfg,
            model_name: "mock",
        };
        runner.run(&instance, &schema, &[])
    };
    let q1 = "```sql\nSELECT name FROM singer\n```";
    let q2 = "```sql\nSELECT id FROM singer\n```";

    // Scripted repetition → consensus at turn 1.
    let r = run(
        MockScript::from_pairs(&[
            ("*", q1),
            ("*", PANEL_JSON),
            ("*", "c"),
            ("*", "c"),
            ("*", "c"),
            ("*", q1),
        ]),
        &cfg,
    );
    assert_eq!(r.termination, Termination::Consensus);
    assert_eq!(r.review_turns_used, 1);
    assert_eq!(r.debug_turns_used, 0);
    assert_eq!(r.llm_calls, 6);

    // Scripted alternation with max_review_turns = 3 → review_cap.
    let mut pairs = vec![("*", q1), ("*", PANEL_JSON)];
    for turn in 0..3 {
        pairs.extend([("*", "c"), ("*", "c"), ("*", "c")]);
        pairs.push(("*", if turn % 2 == 0 { q2 } else { q1 }));
    }
    let r = run(MockScript::from_pairs(&pairs), &cfg);
    assert_eq!(r.termination, Termination::ReviewCap);
    assert_eq!(r.review_turns_used, 3);
    assert_eq!(r.debug_turns_used, 0);
    assert_eq!(r.llm_calls, 14);

    // Permanent syntax error with max_debug_turns = 2 → debug_exhausted.
    let bad = "```sql\nSELEC 1\n```";
    let r = run(
        MockScript::from_pairs(&[("*", bad), ("*", bad), ("*", bad)]),
        &RunConfig {
            max_debug_turns: 2,
            ..cfg.clone()
        },
    );
    assert_eq!(r.termination, Termination::DebugExhausted);
    assert_eq!(r.debug_turns_used, 2);
    assert_eq!(r.review_turns_used, 0);
    assert_eq!(r.llm_calls, 3);

    println!("ACCEPTANCE 2 (consensus & caps): PASS — exact counters on all three terminations");
}

// ---------------------------------------------------------------------------
// Criterion 3: transpiler dual execution
// ---------------------------------------------------------------------------

#[derive(Clone)]
struct GenTable {
    name: String,
    /// (name, kind) where kind is 'i' (integer), 'r' (real), 't' (text).
    columns: Vec<(String, char)>,
    rows: Vec<Vec<CellValue>>,
}

fn gen_cell(rng: &mut StdRng, kind: char, allow_null: bool) -> CellValue {
    if allow_null && rng.gen_bool(0.12) {
        return CellValue::Null;
    }
    match kind {
        'i' => CellValue::Int(rng.gen_range(0..=4)),
        'r' => CellValue::Real([0.5, 1.5, 2.5, 3.5][rng.gen_range(0..4)]),
        _ => CellValue::Text(["a", "b", "c"][rng.gen_range(0..3)].to_string()),
    }
}

fn gen_schema(rng: &mut StdRng) -> Vec<GenTable> {
    let n_tables = rng.gen_range(1..=3);
    (0..n_tables)
        .map(|ti| {
            let name = format!("t{ti}");
            let mut columns = vec![("k".to_string(), 'i')];
            for ci in 0..rng.gen_range(1..=3) {
                let kind = ['i', 'r', 't'][rng.gen_range(0..3)];
                columns.push((format!("t{ti}_c{ci}"), kind));
            }
            let n_rows = rng.gen_range(0..=8);
            let rows = (0..n_rows)
                .map(|_| {
                    columns
                        .iter()
                        .enumerate()
                        .map(|(i, (_, kind))| gen_cell(rng, *kind, i > 0))
                        .collect()
                })
                .collect();
            GenTable {
                name,
                columns,
                rows,
            }
        })
        .collect()
}

fn sql_literal(cell: &CellValue) -> String {
    match cell {
        CellValue::Null => "NULL".to_string(),
        CellValue::Int(v) => v.to_string(),
        CellValue::Real(v) => format!("{v:?}"),
        CellValue::Text(v) => format!("'{}'", v.replace('\'', "''")),
        // The generator never emits blobs.
        CellValue::Blob(_) => unreachable!("generator does not produce blobs"),
    }
}

fn materialize(dir: &Path, tables: &[GenTable]) -> (DatabaseCatalog, DatabaseSchema, BTreeMap<String, ResultTable>) {
    let path = dir.join("gen.sqlite");
    let _ = std::fs::remove_file(&path);
    let conn = rusqlite::Connection::open(&path).unwrap();
    let mut env = BTreeMap::new();
    let mut defs = Vec::new();
    for t in tables {
        let decls: Vec<String> = t
            .columns
            .iter()
            .map(|(n, kind)| {
                let ty = match kind {
                    'i' => "INTEGER",
                    'r' => "REAL",
                    _ => "TEXT",
                };
                format!("{n} {ty}")
            })
            .collect();
        conn.execute_batch(&format!("CREATE TABLE {} ({});", t.name, decls.join(", ")))
            .unwrap();
        for row in &t.rows {
            let vals: Vec<String> = row.iter().map(sql_literal).collect();
            conn.execute_batch(&format!(
                "INSERT INTO {} VALUES ({});",
                t.name,
                vals.join(", ")
            ))
            .unwrap();
        }
        env.insert(
            t.name.clone(),
            ResultTable {
                columns: t.columns.iter().map(|(n, _)| n.clone()).collect(),
                rows: t.rows.clone(),
                truncated: false,
            },
        );
        defs.push(TableDef {
            name: t.name.clone(),
            columns: t
                .columns
                .iter()
                .map(|(n, kind)| ColumnDef {
                    name: n.clone(),
                    decl_type: match kind {
                        'i' => "INTEGER",
                        'r' => "REAL",
                        _ => "TEXT",
                    }
                    .to_string(),
                    is_primary_key: false,
                })
                .collect(),
        });
    }
    drop(conn);
    let mut catalog = DatabaseCatalog::new();
    catalog.add("gen", &path).unwrap();
    let schema = DatabaseSchema {
        db_id: "gen".into(),
        tables: defs,
        foreign_keys: vec![],
    };
    (catalog, schema, env)
}

fn gen_literal(rng: &mut StdRng, kind: char) -> Literal {
    match kind {
        'i' => Literal::Int(rng.gen_range(0..=4)),
        'r' => Literal::Real([0.5, 1.5, 2.5, 3.5][rng.gen_range(0..4)]),
        _ => Literal::Text(["a", "b", "c"][rng.gen_range(0..3)].to_string()),
    }
}

fn gen_op(rng: &mut StdRng) -> CmpOp {
    [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge][rng.gen_range(0..6)]
}

/// Build one random program over `tables`. Returns the program and whether
/// its output row order is pinned (outermost Sort, optionally under Limit).
fn gen_program(rng: &mut StdRng, tables: &[GenTable]) -> (CodeBlockProgram, bool) {
    // Base: a table, or a join of two distinct tables on the shared key.
    let (mut expr, mut cols): (DslExpr, Vec<(String, char)>) =
        if tables.len() >= 2 && rng.gen_bool(0.5) {
            let a = rng.gen_range(0..tables.len());
            let mut b = rng.gen_range(0..tables.len());
            while b == a {
                b = rng.gen_range(0..tables.len());
            }
            let (ta, tb) = (&tables[a], &tables[b]);
            let mut cols = ta.columns.clone();
            cols.extend(tb.columns.iter().filter(|(n, _)| n != "k").cloned());
            (
                DslExpr::Merge {
                    left: Box::new(DslExpr::TableRef(ta.name.clone())),
                    right: Box::new(DslExpr::TableRef(tb.name.clone())),
                    on: "k".into(),
                    how: if rng.gen_bool(0.5) {
                        MergeHow::Inner
                    } else {
                        MergeHow::Left
                    },
                },
                cols,
            )
        } else {
            let t = &tables[rng.gen_range(0..tables.len())];
            (DslExpr::TableRef(t.name.clone()), t.columns.clone())
        };

    let mut steps: Vec<Step> = Vec::new();
    // Mask-style operations (filter, isin) are only printable over a named
    // source, so compound expressions get parked in an intermediate step
    // first; this doubles as multi-step lowering coverage.
    let ensure_named = |expr: DslExpr, steps: &mut Vec<Step>| -> DslExpr {
        if matches!(expr, DslExpr::TableRef(_) | DslExpr::StepRef(_)) {
            return expr;
        }
        let target = format!("step{}_result", steps.len() + 1);
        steps.push(Step {
            target: target.clone(),
            expr,
        });
        DslExpr::StepRef(target)
    };
    // Sometimes park the base anyway, to exercise step references.
    if rng.gen_bool(0.4) && matches!(expr, DslExpr::TableRef(_)) {
        steps.push(Step {
            target: "step1_result".into(),
            expr,
        });
        expr = DslExpr::StepRef("step1_result".into());
    }

    if rng.gen_bool(0.6) {
        expr = ensure_named(expr, &mut steps);
        let n_cmp = rng.gen_range(1..=2);
        let predicate = (0..n_cmp)
            .map(|_| {
                let (name, kind) = cols[rng.gen_range(0..cols.len())].clone();
                Comparison {
                    column: name,
                    op: gen_op(rng),
                    value: gen_literal(rng, kind),
                }
            })
            .collect();
        expr = DslExpr::Filter {
            src: Box::new(expr),
            predicate,
        };
    }

    if rng.gen_bool(0.3) {
        if let Some((col, _)) = cols.iter().find(|(_, kind)| *kind == 'i').cloned() {
            let other = &tables[rng.gen_range(0..tables.len())];
            expr = ensure_named(expr, &mut steps);
            expr = DslExpr::IsIn {
                src: Box::new(expr),
                column: col,
                other: Box::new(DslExpr::TableRef(other.name.clone())),
                other_column: "k".into(),
                negated: rng.gen_bool(0.5),
            };
        }
    }

    if rng.gen_bool(0.4) && cols.len() >= 2 {
        let key_idx = rng.gen_range(0..cols.len());
        let key = cols[key_idx].clone();
        let mut others: Vec<(String, char)> = cols
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != key_idx)
            .map(|(_, c)| c.clone())
            .collect();
        let n_aggs = rng.gen_range(1..=others.len().min(2));
        let mut aggs = Vec::new();
        let mut new_cols = vec![key.clone()];
        for _ in 0..n_aggs {
            let (col, kind) = others.remove(rng.gen_range(0..others.len()));
            let func = if kind == 't' {
                [AggFunc::Count, AggFunc::Min, AggFunc::Max][rng.gen_range(0..3)]
            } else {
                [
                    AggFunc::Count,
                    AggFunc::Sum,
                    AggFunc::Avg,
                    AggFunc::Min,
                    AggFunc::Max,
                ][rng.gen_range(0..5)]
            };
            let out_kind = match func {
                AggFunc::Count => 'i',
                AggFunc::Avg => 'r',
                AggFunc::Sum => {
                    if kind == 'r' {
                        'r'
                    } else {
                        'i'
                    }
                }
                AggFunc::Min | AggFunc::Max => kind,
            };
            new_cols.push((format!("{}_{col}", func_dsl_name(func)), out_kind));
            aggs.push((col, func));
        }
        expr = DslExpr::GroupAgg {
            src: Box::new(expr),
            keys: vec![key.0],
            aggs,
        };
        cols = new_cols;
    }

    if rng.gen_bool(0.3) && cols.len() >= 2 {
        let keep = rng.gen_range(1..cols.len());
        let mut pool = cols.clone();
        let mut subset = Vec::new();
        for _ in 0..keep {
            subset.push(pool.remove(rng.gen_range(0..pool.len())));
        }
        expr = DslExpr::ColumnSelect {
            src: Box::new(expr),
            columns: subset.iter().map(|(n, _)| n.clone()).collect(),
        };
        cols = subset;
    }

    let mut ordered = false;
    if rng.gen_bool(0.5) {
        let n_keys = rng.gen_range(1..=cols.len().min(2));
        let mut pool = cols.clone();
        let mut keys = Vec::new();
        for _ in 0..n_keys {
            keys.push(pool.remove(rng.gen_range(0..pool.len())).0);
        }
        let desc = (0..keys.len()).map(|_| rng.gen_bool(0.5)).collect();
        expr = DslExpr::Sort {
            src: Box::new(expr),
            keys,
            desc,
        };
        ordered = true;
        if rng.gen_bool(0.5) {
            expr = DslExpr::Limit {
                src: Box::new(expr),
                n: rng.gen_range(0..=4),
            };
        }
    }

    steps.push(Step {
        target: "result".into(),
        expr,
    });
    (CodeBlockProgram { steps }, ordered)
}

fn func_dsl_name(f: AggFunc) -> &'static str {
    match f {
        AggFunc::Count => "count",
        AggFunc::Sum => "sum",
        AggFunc::Avg => "avg",
        AggFunc::Min => "min",
        AggFunc::Max => "max",
    }
}

fn cells_agree(a: &CellValue, b: &CellValue) -> bool {
    match (a, b) {
        (CellValue::Int(x), CellValue::Int(y)) => x == y,
        (CellValue::Real(x), CellValue::Real(y)) => {
            (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0)
        }
        (CellValue::Int(x), CellValue::Real(y)) | (CellValue::Real(y), CellValue::Int(x)) => {
            (*x as f64 - y).abs() <= 1e-9 * y.abs().max(1.0)
        }
        _ => a == b,
    }
}

fn tables_agree(a: &ResultTable, b: &ResultTable, ordered: bool) -> bool {
    if a.columns != b.columns || a.rows.len() != b.rows.len() {
        return false;
    }
    let key = |rows: &[Vec<CellValue>]| {
        let mut sorted = rows.to_vec();
        sorted.sort_by(|x, y| {
            x.iter()
                .zip(y.iter())
                .map(|(cx, cy)| transpiler::cell_cmp(cx, cy))
                .find(|o| *o != std::cmp::Ordering::Equal)
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        sorted
    };
    let (ra, rb) = if ordered {
        (a.rows.clone(), b.rows.clone())
    } else {
        (key(&a.rows), key(&b.rows))
    };
    ra.iter()
        .zip(rb.iter())
        .all(|(x, y)| x.iter().zip(y.iter()).all(|(cx, cy)| cells_agree(cx, cy)))
}

#[test]
fn acceptance_3_transpiler_dual_execution() {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(0x5eed_cafe);
    let dir = TempDir::new().unwrap();
    let mut checked = 0usize;
    while checked < 500 {
        let tables = gen_schema(&mut rng);
        let (catalog, schema, env) = materialize(dir.path(), &tables);
        for _ in 0..5 {
            let (program, ordered) = gen_program(&mut rng, &tables);
            let sql = lower_or_panic(&program, &schema);
            let via_sql = sandbox::execute(
                &catalog,
                "gen",
                &sql,
                Duration::from_secs(10),
                0,
            )
            .unwrap();
            let via_sql = via_sql
                .table()
                .unwrap_or_else(|| {
                    panic!(
                        "lowered SQL failed to execute:\n{}\nprogram:\n{}\nerror: {:?}",
                        sql.raw,
                        transpiler::pretty_print(&program),
                        via_sql.error()
                    )
                })
                .clone();
            let via_interp = transpiler::interpret(&program, &env).unwrap();
            assert!(
                tables_agree(&via_sql, &via_interp, ordered),
                "dual execution disagrees (ordered={ordered})\nprogram:\n{}\nsql: {}\nsandbox: {:?}\ninterp: {:?}",
                transpiler::pretty_print(&program),
                sql.raw,
                via_sql,
                via_interp
            );
            // The printer/parser must round-trip every generated program.
            let reparsed = transpiler::parse_program(&transpiler::pretty_print(&program)).unwrap();
            assert_eq!(reparsed, program);
            checked += 1;
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(60), "dual execution took {elapsed:?}");
    println!(
        "ACCEPTANCE 3 (transpiler dual execution): PASS — {checked} random programs agree in {elapsed:?}"
    );
}

fn lower_or_panic(program: &CodeBlockProgram, schema: &DatabaseSchema) -> SqlQuery {
    transpiler::lower_to_sql(program, schema).unwrap_or_else(|e| {
        panic!(
            "lowering failed: {e}\nprogram:\n{}",
            transpiler::pretty_print(program)
        )
    })
}

// ---------------------------------------------------------------------------
// Criterion 4: evaluator fixtures
// ---------------------------------------------------------------------------

fn record_for(id: &str, gold: &str, pred: &str) -> RunRecord {
    RunRecord {
        instance_id: id.to_string(),
        db_id: "acc".into(),
        gold_sql: Some(gold.to_string()),
        transcript: DialogueHistory::new(8192),
        debug_turns_used: 0,
        review_turns_used: 0,
        final_sql: SqlQuery::new(pred),
        termination: Termination::Consensus,
        outcome: None,
        error_label: None,
        notes: BTreeMap::new(),
        llm_calls: 0,
    }
}

#[test]
fn acceptance_4_evaluator_fixtures() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("acc.sqlite");
    let conn = rusqlite::Connection::open(&path).unwrap();
    conn.execute_batch(
        "CREATE TABLE emp (id INTEGER, name TEXT, dept TEXT, salary INTEGER);\n\
         INSERT INTO emp VALUES (1,'a','x',10),(2,'b','x',20),(3,'c','y',30);",
    )
    .unwrap();
    drop(conn);
    let mut catalog = DatabaseCatalog::new();
    catalog.add("acc", &path).unwrap();

    // (gold, pred, expect-match, expect-reason) — labels derived by hand.
    use VerdictReason::*;
    let fixtures: Vec<(&str, &str, bool, VerdictReason)> = vec![
        ("SELECT id, name FROM emp", "SELECT id, name FROM emp", true, Exact),
        ("SELECT id, name FROM emp", "select id , name from emp", true, Exact),
        ("SELECT id, name FROM emp", "SELECT name, id FROM emp", true, PermutedColumns),
        ("SELECT id, name, dept FROM emp", "SELECT dept, id, name FROM emp", true, PermutedColumns),
        ("SELECT id FROM emp ORDER BY id DESC", "SELECT id FROM emp ORDER BY id DESC", true, Exact),
        ("SELECT id FROM emp ORDER BY id DESC", "SELECT id FROM emp ORDER BY id ASC", false, OrderMismatch),
        ("SELECT id FROM emp", "SELECT id FROM emp ORDER BY id DESC", true, Exact),
        ("SELECT salary FROM emp", "SELECT salary + 1 FROM emp", false, ValueMismatch),
        ("SELECT id, name FROM emp", "SELECT id FROM emp", false, ValueMismatch),
        ("SELECT id FROM emp", "SELECT missing FROM emp", false, PredError),
        ("SELECT id FROM emp", "SELEC id FROM emp", false, PredError),
        ("SELECT count(*) FROM emp", "SELECT COUNT(id) FROM emp", true, Exact),
        ("SELECT name FROM emp WHERE dept = 'x'", "SELECT name FROM emp WHERE salary < 30", true, Exact),
        ("SELECT name FROM emp WHERE dept = 'x'", "SELECT name FROM emp WHERE dept = 'y'", false, ValueMismatch),
        ("SELECT id FROM emp WHERE salary > 100", "SELECT id FROM emp WHERE salary > 999", true, Exact),
        ("SELECT id FROM emp", "SELECT id FROM emp WHERE salary > 100", false, ValueMismatch),
        ("SELECT id, name FROM emp ORDER BY id", "SELECT name, id FROM emp ORDER BY id", true, PermutedColumns),
        ("SELECT name FROM emp ORDER BY name", "SELECT name FROM emp ORDER BY name DESC", false, OrderMismatch),
        ("SELECT id FROM emp WHERE id IN (SELECT id FROM emp)", "SELECT id FROM emp", true, Exact),
        ("SELECT id FROM emp", "SELECT id FROM nope", false, PredError),
    ];
    assert_eq!(fixtures.len(), 20);

    let records: Vec<RunRecord> = fixtures
        .iter()
        .enumerate()
        .map(|(i, (gold, pred, _, _))| record_for(&format!("f{i:02}"), gold, pred))
        .collect();
    let scored = evaluator::score_records(&records, &catalog, Duration::from_secs(10)).unwrap();
    let mut hits = 0usize;
    for (i, (scored, (gold, pred, want_match, want_reason))) in
        scored.iter().zip(fixtures.iter()).enumerate()
    {
        assert_eq!(
            (scored.verdict.matched, scored.verdict.reason.clone()),
            (*want_match, want_reason.clone()),
            "fixture {i}: gold `{gold}` vs pred `{pred}`"
        );
        hits += usize::from(scored.verdict.matched);
    }
    let expected_accuracy = hits as f64 / 20.0;
    let accuracy =
        evaluator::execution_accuracy(&records, &catalog, Duration::from_secs(10)).unwrap();
    assert_eq!(accuracy, expected_accuracy);
    assert_eq!(accuracy, 0.55);
    println!(
        "ACCEPTANCE 4 (evaluator fixtures): PASS — 20/20 verdicts, accuracy {accuracy} matches hand count"
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: Mann-Whitney exact path vs a brute-force oracle
// ---------------------------------------------------------------------------

/// Independent oracle: midranks via sort-and-average, then recursive
/// enumeration of every n1-subset of pooled positions. Two-sided p is the
/// fraction of assignments whose min(U1, U2) is ≤ the observed value.
fn oracle_mwu(a: &[f64], b: &[f64]) -> (f64, f64) {
    let n1 = a.len();
    let n2 = b.len();
    let pooled: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&x, &y| pooled[x].partial_cmp(&pooled[y]).unwrap());
    let mut ranks = vec![0.0; pooled.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mid;
        }
        i = j + 1;
    }
    let min_u = |idx: &[usize]| -> f64 {
        let r1: f64 = idx.iter().map(|&i| ranks[i]).sum();
        let u1 = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
        u1.min((n1 * n2) as f64 - u1)
    };
    let observed = min_u(&(0..n1).collect::<Vec<_>>());

    let mut le = 0u64;
    let mut total = 0u64;
    fn walk(
        start: usize,
        left: usize,
        n: usize,
        chosen: &mut Vec<usize>,
        visit: &mut impl FnMut(&[usize]),
    ) {
        if left == 0 {
            visit(chosen);
            return;
        }
        for i in start..=n - left {
            chosen.push(i);
            walk(i + 1, left - 1, n, chosen, visit);
            chosen.pop();
        }
    }
    walk(0, n1, n1 + n2, &mut Vec::new(), &mut |idx| {
        total += 1;
        if min_u(idx) <= observed + 1e-9 {
            le += 1;
        }
    });
    (observed, le as f64 / total as f64)
}

#[test]
fn acceptance_5_mann_whitney_exact_vs_oracle() {
    // The published fold-level significance anchor (p = 0.0024 for GPT-4 on
    // Spider-Dev) is NOT reproduced here: the underlying ten fold accuracies
    // were never published, so no oracle for that exact number can exist.
    // What is verified instead: the exact path agrees with an independent
    // brute-force enumeration on every small sample size.
    let mut rng = StdRng::seed_from_u64(97);
    for case in 0..100 {
        let n1 = rng.gen_range(1..=9usize);
        let n2 = rng.gen_range(1..=(10 - n1).max(1)).min(10 - n1).max(1);
        let a: Vec<f64> = (0..n1).map(|_| rng.gen_range(0..=5) as f64).collect();
        let b: Vec<f64> = (0..n2).map(|_| rng.gen_range(0..=5) as f64).collect();
        let (u_lib, p_lib) = evaluator::mann_whitney_u(&a, &b).unwrap();
        let (u_oracle, p_oracle) = oracle_mwu(&a, &b);
        assert_eq!(u_lib, u_oracle, "case {case}: U differs for {a:?} vs {b:?}");
        assert!(
            (p_lib - p_oracle).abs() < 1e-12,
            "case {case}: p differs for {a:?} vs {b:?}: {p_lib} vs {p_oracle}"
        );
    }
    // Documented anchors for the exact path.
    let (u, p) = evaluator::mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
    assert_eq!((u, p), (0.0, 0.1));
    println!(
        "ACCEPTANCE 5 (Mann-Whitney exact): PASS — 100 random samples match the enumeration oracle; p=0.0024 anchor documented as non-reproducible (fold accuracies unpublished)"
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: prompt golden files
// ---------------------------------------------------------------------------

fn golden_schema() -> DatabaseSchema {
    DatabaseSchema {
        db_id: "concert_singer".into(),
        tables: vec![
            TableDef {
                name: "stadium".into(),
                columns: vec![
                    ColumnDef { name: "stadium_id".into(), decl_type: "INTEGER".into(), is_primary_key: true },
                    ColumnDef { name: "name".into(), decl_type: "TEXT".into(), is_primary_key: false },
                    ColumnDef { name: "capacity".into(), decl_type: "INTEGER".into(), is_primary_key: false },
                ],
            },
            TableDef {
                name: "concert".into(),
                columns: vec![
                    ColumnDef { name: "concert_id".into(), decl_type: "INTEGER".into(), is_primary_key: true },
                    ColumnDef { name: "concert_name".into(), decl_type: "TEXT".into(), is_primary_key: false },
                    ColumnDef { name: "stadium_id".into(), decl_type: "INTEGER".into(), is_primary_key: false },
                ],
            },
        ],
        foreign_keys: vec![ForeignKey {
            from_table: "concert".into(),
            from_column: "stadium_id".into(),
            to_table: "stadium".into(),
            to_column: "stadium_id".into(),
        }],
    }
}

fn check_golden(name: &str, rendered: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/goldens")
        .join(name);
    if std::env::var("QUORUM_SQL_UPDATE_GOLDENS").is_ok() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, rendered).unwrap();
        return;
    }
    let golden = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("missing golden {}: {e}", path.display()));
    assert_eq!(rendered, golden, "golden drift in {name}");
}

#[test]
fn acceptance_6_prompt_goldens() {
    let schema = golden_schema();
    let schema_text = prompts::serialize_schema(&schema, None);
    let question = "Show the name of each stadium and the number of concerts held there.";
    let pred_sql = "SELECT T2.name, COUNT(*) FROM concert AS T1 JOIN stadium AS T2 ON T1.stadium_id = T2.stadium_id GROUP BY T1.stadium_id";
    let shots = "QUESTION: How many singers are there?\nSQL: SELECT count(*) FROM singer";

    let writer_bindings: Bindings = [
        ("evidence", ""),
        ("question", question),
        ("related_sql", shots),
        ("schema", schema_text.as_str()),
    ]
    .into_iter()
    .collect();
    let writer = prompts::render(TemplateName::CotWriter.body(), &writer_bindings).unwrap();

    let invitation_bindings: Bindings = [
        ("n", "3"),
        ("schema", schema_text.as_str()),
        ("question", question),
        ("pred_sql", pred_sql),
    ]
    .into_iter()
    .collect();
    let invitation =
        prompts::render(TemplateName::Invitation.body(), &invitation_bindings).unwrap();

    let result_table = sandbox::render_table(
        &ResultTable {
            columns: vec!["name".into(), "COUNT(*)".into()],
            rows: vec![
                vec![CellValue::Text("Stark Pavilion".into()), CellValue::Int(4)],
                vec![CellValue::Text("Glebe Park".into()), CellValue::Int(2)],
            ],
            truncated: false,
        },
        50,
        80,
    );
    let review_bindings: Bindings = [
        ("schema", schema_text.as_str()),
        ("question", question),
        ("pred_sql", pred_sql),
        ("result_table", result_table.as_str()),
    ]
    .into_iter()
    .collect();
    let review = prompts::render(TemplateName::ReviewerComment.body(), &review_bindings).unwrap();

    assert!(writer.contains("### DATABASE STRUCTURE:"));
    assert!(invitation.contains("### DATABASE STRUCTURE:"));
    assert!(invitation.contains("### INVITATION:"));
    assert!(review.contains("### DATABASE STRUCTURE:"));

    check_golden("writer_cot.txt", &writer);
    check_golden("invitation.txt", &invitation);
    check_golden("reviewer_comment.txt", &review);
    println!("ACCEPTANCE 6 (prompt goldens): PASS — three rendered prompts byte-identical to goldens");
}

// ---------------------------------------------------------------------------
// Criterion 7: history truncation property
// ---------------------------------------------------------------------------

#[test]
fn acceptance_7_truncation_property() {
    let mut rng = StdRng::seed_from_u64(1234);
    let mut ok_cases = 0usize;
    for case in 0..1000 {
        let budget = rng.gen_range(10..=2000usize);
        let n_msgs = rng.gen_range(1..=25usize);
        let mut history = DialogueHistory::new(budget);
        for i in 0..n_msgs {
            let role = if i == 0 || rng.gen_bool(0.5) {
                Role::User
            } else {
                Role::Assistant
            };
            let author = if role == Role::User {
                Author::Environment
            } else {
                Author::Writer
            };
            let len = rng.gen_range(0..=400usize);
            let mut content: String = (0..len)
                .map(|_| (b'a' + rng.gen_range(0..26u8)) as char)
                .collect();
            if rng.gen_bool(0.3) {
                content.push('\n');
                content.push_str("tail section after the first line");
            }
            history.push(AgentMessage::new(role, author, content));
        }
        let first_user_line = history
            .first_user_index()
            .map(|i| history.messages[i].content.lines().next().unwrap_or("").to_string());
        match prompts::truncate_history(&history) {
            Ok(truncated) => {
                assert!(
                    truncated.token_sum() <= budget,
                    "case {case}: sum {} > budget {budget}",
                    truncated.token_sum()
                );
                if let Some(line) = &first_user_line {
                    assert!(
                        truncated
                            .messages
                            .iter()
                            .any(|m| m.role == Role::User && m.content.starts_with(line.as_str())),
                        "case {case}: first user message lost"
                    );
                }
                ok_cases += 1;
            }
            Err(prompts::PromptError::BudgetTooSmall { budget: b, needed }) => {
                assert_eq!(b, budget);
                assert!(budget < needed, "case {case}: spurious budget error");
            }
            Err(e) => panic!("case {case}: unexpected error {e}"),
        }
    }
    assert!(ok_cases >= 500, "too few satisfiable cases: {ok_cases}");
    println!(
        "ACCEPTANCE 7 (truncation property): PASS — 1000 cases ({ok_cases} within budget, rest correctly rejected)"
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: benchmark loader counts (env-gated)
// ---------------------------------------------------------------------------

fn first_existing(base: &Path, candidates: &[&str]) -> Option<PathBuf> {
    candidates
        .iter()
        .map(|c| base.join(c))
        .find(|p| p.exists())
}

#[test]
fn acceptance_8_loader_counts() {
    let spider = std::env::var_os("QUORUM_SQL_SPIDER_DEV").map(PathBuf::from);
    let bird = std::env::var_os("QUORUM_SQL_BIRD_DEV").map(PathBuf::from);
    if spider.is_none() && bird.is_none() {
        println!(
            "ACCEPTANCE 8 (loader counts): SKIP — set QUORUM_SQL_SPIDER_DEV and/or QUORUM_SQL_BIRD_DEV to benchmark directories to run"
        );
        return;
    }
    if let Some(root) = spider {
        let manifest = BenchmarkManifest {
            name: "spider".into(),
            questions: first_existing(&root, &["dev.json"]).expect("dev.json"),
            tables: first_existing(&root, &["tables.json"]).expect("tables.json"),
            database_root: first_existing(&root, &["database"]).expect("database/"),
            split: Split::Dev,
        };
        let loaded = datasets::load_benchmark(&manifest).unwrap();
        assert_eq!(loaded.instances.len(), 1034, "Spider-Dev instance count");
    }
    if let Some(root) = bird {
        let manifest = BenchmarkManifest {
            name: "bird".into(),
            questions: first_existing(&root, &["dev.json", "dev/dev.json"]).expect("dev.json"),
            tables: first_existing(&root, &["dev_tables.json", "dev/dev_tables.json"])
                .expect("dev_tables.json"),
            database_root: first_existing(&root, &["dev_databases", "dev/dev_databases"])
                .expect("dev_databases/"),
            split: Split::Dev,
        };
        let loaded = datasets::load_benchmark(&manifest).unwrap();
        assert_eq!(loaded.instances.len(), 1534, "Bird-Dev instance count");
        assert!(loaded
            .instances
            .iter()
            .all(|i| i.evidence.is_some()));
    }
    println!("ACCEPTANCE 8 (loader counts): PASS — supplied benchmark directories load with expected counts");
}

// ---------------------------------------------------------------------------
// Criterion 9: live smoke (env-gated, excluded from CI)
// ---------------------------------------------------------------------------

#[test]
fn acceptance_9_live_smoke() {
    if std::env::var("QUORUM_SQL_LIVE_SMOKE").as_deref() != Ok("1") {
        println!(
            "ACCEPTANCE 9 (live smoke): SKIP — set QUORUM_SQL_LIVE_SMOKE=1, QUORUM_SQL_API_KEY, QUORUM_SQL_BASE_URL, QUORUM_SQL_MODEL and QUORUM_SQL_SPIDER_DEV to run"
        );
        return;
    }
    let backend = HttpBackend::from_env().expect("QUORUM_SQL_API_KEY/BASE_URL/MODEL must be set");
    let root = PathBuf::from(
        std::env::var("QUORUM_SQL_SPIDER_DEV").expect("QUORUM_SQL_SPIDER_DEV must be set"),
    );
    let manifest = BenchmarkManifest {
        name: "spider".into(),
        questions: root.join("dev.json"),
        tables: root.join("tables.json"),
        database_root: root.join("database"),
        split: Split::Dev,
    };
    let loaded = datasets::load_benchmark(&manifest).unwrap();
    let sample = datasets::subsample(&loaded.instances, 20, 7).unwrap();
    let model = std::env::var("QUORUM_SQL_MODEL").unwrap_or_default();

    let run_all = |cfg: &RunConfig| -> Vec<RunRecord> {
        sample
            .iter()
            .map(|instance| {
                let schema = loaded.schema_for(&instance.db_id).unwrap();
                let runner = Runner {
                    client: &backend as &dyn ChatBackend,
                    catalog: &loaded.catalog,
                    config: cfg,
                    model_name: &model,
                };
                runner.run(instance, schema, &[])
            })
            .collect()
    };

    let loop_cfg = RunConfig::default();
    let single_cfg = RunConfig {
        max_review_turns: 0,
        max_debug_turns: 0,
        n_reviewers: 0,
        mode: WriterMode::Cot,
        ..RunConfig::default()
    };
    let loop_records = run_all(&loop_cfg);
    let single_records = run_all(&single_cfg);
    assert!(
        loop_records
            .iter()
            .chain(single_records.iter())
            .all(|r| r.termination != Termination::ClientError),
        "live runs hit client errors"
    );
    let acc_loop =
        evaluator::execution_accuracy(&loop_records, &loaded.catalog, Duration::from_secs(30))
            .unwrap();
    let acc_single =
        evaluator::execution_accuracy(&single_records, &loaded.catalog, Duration::from_secs(30))
            .unwrap();
    assert!(
        acc_loop >= acc_single,
        "consensus loop ({acc_loop}) under single-pass baseline ({acc_single})"
    );
    println!(
        "ACCEPTANCE 9 (live smoke): PASS — loop accuracy {acc_loop} >= single-pass {acc_single} on 20 instances"
    );
}
