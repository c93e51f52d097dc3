//! Execution-accuracy scoring, error-taxonomy reporting, and the
//! Mann-Whitney U significance test.
//!
//! Predicted and gold SQL are both executed and their result tables compared
//! as multisets of rows (order-sensitive only when the gold query has a
//! top-level ORDER BY), with a bounded column-permutation search so queries
//! that emit the same columns in a different order still count as correct.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Duration;

use crate::sandbox::{self, DatabaseCatalog};
use crate::types::{CellValue, Outcome, ResultTable, RunRecord, SqlQuery};

/// Largest column count for which the permutation search runs (8! = 40320
/// candidate orders); wider tables fall back to order-as-given comparison.
pub const MAX_PERMUTED_COLUMNS: usize = 8;

/// Relative tolerance for numeric cell comparison; engine float formatting
/// differs across platforms.
pub const NUMERIC_RTOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictReason {
    Exact,
    PermutedColumns,
    OrderMismatch,
    ValueMismatch,
    PredError,
    GoldErrorExec,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ComparisonVerdict {
    pub matched: bool,
    pub reason: VerdictReason,
    /// Set when the >8-column fallback skipped the permutation search.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ComparisonVerdict {
    fn of(matched: bool, reason: VerdictReason) -> Self {
        debug_assert!(
            !matched || matches!(reason, VerdictReason::Exact | VerdictReason::PermutedColumns)
        );
        Self {
            matched,
            reason,
            note: None,
        }
    }

    pub fn pred_error() -> Self {
        Self::of(false, VerdictReason::PredError)
    }

    pub fn gold_error() -> Self {
        Self::of(false, VerdictReason::GoldErrorExec)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("no records to score")]
    MissingData,
    #[error("record `{0}` has no gold SQL")]
    MissingGold(String),
    #[error("label attached to passing instance `{0}`")]
    LabelOnSuccess(String),
    #[error("unknown error label `{0}`")]
    UnknownLabel(String),
    #[error("empty sample")]
    EmptySample,
}

// ---------------------------------------------------------------------------
// Result comparison
// ---------------------------------------------------------------------------

/// True when `sql` has an ORDER BY clause at the outermost statement level,
/// detected lexically (outside string literals, at parenthesis depth 0).
pub fn has_outer_order_by(sql: &str) -> bool {
    let bytes = sql.as_bytes();
    let mut depth = 0i32;
    let mut i = 0;
    let mut pending_order: Option<i32> = None;
    while i < bytes.len() {
        match bytes[i] {
            b'\'' | b'"' | b'`' => {
                let quote = bytes[i];
                i += 1;
                while i < bytes.len() && bytes[i] != quote {
                    i += 1;
                }
                i += 1;
            }
            b'(' => {
                depth += 1;
                i += 1;
            }
            b')' => {
                depth -= 1;
                i += 1;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                let word = sql[start..i].to_ascii_lowercase();
                if word == "by" && pending_order == Some(depth) && depth == 0 {
                    return true;
                }
                pending_order = if word == "order" { Some(depth) } else { None };
            }
            _ => {
                i += 1;
            }
        }
    }
    false
}

fn cell_eq(a: &CellValue, b: &CellValue) -> bool {
    fn num(c: &CellValue) -> Option<f64> {
        match c {
            CellValue::Int(v) => Some(*v as f64),
            CellValue::Real(v) => Some(*v),
            _ => None,
        }
    }
    match (a, b) {
        (CellValue::Null, CellValue::Null) => true,
        (CellValue::Int(x), CellValue::Int(y)) => x == y,
        (CellValue::Text(x), CellValue::Text(y)) => x == y,
        (CellValue::Blob(x), CellValue::Blob(y)) => x == y,
        _ => match (num(a), num(b)) {
            (Some(x), Some(y)) => {
                let scale = x.abs().max(y.abs());
                (x - y).abs() <= NUMERIC_RTOL * scale.max(1.0)
            }
            _ => false,
        },
    }
}

fn row_eq(gold: &[CellValue], pred: &[CellValue], perm: &[usize]) -> bool {
    gold.iter()
        .enumerate()
        .all(|(i, g)| cell_eq(g, &pred[perm[i]]))
}

/// Compare row collections under a fixed column permutation. Unordered
/// comparison is a greedy multiset matching.
fn rows_match(gold: &[Vec<CellValue>], pred: &[Vec<CellValue>], perm: &[usize], ordered: bool) -> bool {
    if gold.len() != pred.len() {
        return false;
    }
    if ordered {
        return gold
            .iter()
            .zip(pred)
            .all(|(g, p)| row_eq(g, p, perm));
    }
    let mut used = vec![false; pred.len()];
    'outer: for g in gold {
        for (j, p) in pred.iter().enumerate() {
            if !used[j] && row_eq(g, p, perm) {
                used[j] = true;
                continue 'outer;
            }
        }
        return false;
    }
    true
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut items: Vec<usize> = (0..k).collect();
    fn heap(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(items.clone());
            return;
        }
        for i in 0..k {
            heap(items, k - 1, out);
            if k % 2 == 0 {
                items.swap(i, k - 1);
            } else {
                items.swap(0, k - 1);
            }
        }
    }
    heap(&mut items, k, &mut out);
    out
}

/// Compare gold and predicted result tables.
///
/// Rows are multisets of tuples, order-sensitive only when `gold_sql` has a
/// top-level ORDER BY. When the as-given column order does not match, all
/// column permutations are searched (up to [`MAX_PERMUTED_COLUMNS`] wide).
pub fn compare_results(
    gold: &ResultTable,
    pred: &ResultTable,
    gold_sql: &str,
) -> ComparisonVerdict {
    if gold.columns.len() != pred.columns.len() {
        return ComparisonVerdict::of(false, VerdictReason::ValueMismatch);
    }
    let k = gold.columns.len();
    let ordered = has_outer_order_by(gold_sql);
    let identity: Vec<usize> = (0..k).collect();
    if rows_match(&gold.rows, &pred.rows, &identity, ordered) {
        return ComparisonVerdict::of(true, VerdictReason::Exact);
    }
    if k > MAX_PERMUTED_COLUMNS {
        let mut v = ComparisonVerdict::of(false, VerdictReason::ValueMismatch);
        v.note = Some(format!(
            "{k} columns exceed the permutation-search cap; compared order-as-given"
        ));
        return v;
    }
    for perm in permutations(k) {
        if perm == identity {
            continue;
        }
        if rows_match(&gold.rows, &pred.rows, &perm, ordered) {
            return ComparisonVerdict::of(true, VerdictReason::PermutedColumns);
        }
    }
    // Distinguish a pure ordering failure: same multiset, wrong order.
    if ordered && rows_match(&gold.rows, &pred.rows, &identity, false) {
        return ComparisonVerdict::of(false, VerdictReason::OrderMismatch);
    }
    ComparisonVerdict::of(false, VerdictReason::ValueMismatch)
}

// ---------------------------------------------------------------------------
// Execution accuracy
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ScoredRecord {
    pub instance_id: String,
    pub verdict: ComparisonVerdict,
}

/// Execute gold and predicted SQL for each record and compare. Row cap is
/// unlimited: accuracy must see full result sets.
pub fn score_records(
    records: &[RunRecord],
    catalog: &DatabaseCatalog,
    timeout: Duration,
) -> Result<Vec<ScoredRecord>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::MissingData);
    }
    let mut out = Vec::with_capacity(records.len());
    for record in records {
        let gold_sql = record
            .gold_sql
            .as_deref()
            .ok_or_else(|| EvalError::MissingGold(record.instance_id.clone()))?;
        let gold_exec = sandbox::execute(
            catalog,
            &record.db_id,
            &SqlQuery::new(gold_sql),
            timeout,
            0,
        );
        let pred_exec = sandbox::execute(catalog, &record.db_id, &record.final_sql, timeout, 0);
        let verdict = match (gold_exec, pred_exec) {
            (Ok(g), Ok(p)) => match (g.table(), p.table()) {
                (Some(gt), Some(pt)) => compare_results(gt, pt, gold_sql),
                (None, _) => ComparisonVerdict::gold_error(),
                (_, None) => ComparisonVerdict::pred_error(),
            },
            (Err(_), _) => ComparisonVerdict::gold_error(),
            (_, Err(_)) => ComparisonVerdict::pred_error(),
        };
        out.push(ScoredRecord {
            instance_id: record.instance_id.clone(),
            verdict,
        });
    }
    Ok(out)
}

/// Fraction of records whose predicted result matches gold. Nonexecutable
/// predictions count as wrong; order of `records` is irrelevant.
pub fn execution_accuracy(
    records: &[RunRecord],
    catalog: &DatabaseCatalog,
    timeout: Duration,
) -> Result<f64, EvalError> {
    let scored = score_records(records, catalog, timeout)?;
    let hits = scored.iter().filter(|s| s.verdict.matched).count();
    Ok(hits as f64 / scored.len() as f64)
}

// ---------------------------------------------------------------------------
// Mann-Whitney U
// ---------------------------------------------------------------------------

/// Sample-size threshold under which the exact enumeration path is used.
pub const EXACT_ENUMERATION_MAX_N: usize = 12;

/// Assign midranks (1-based) to the combined sample.
fn midranks(combined: &[f64]) -> Vec<f64> {
    let n = combined.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| combined[a].partial_cmp(&combined[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && combined[idx[j + 1]] == combined[idx[i]] {
            j += 1;
        }
        let rank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Advance `choice` to the next k-combination of {0, …, n−1} in
/// lexicographic order; false once exhausted.
fn next_combination(choice: &mut [usize], n: usize) -> bool {
    let k = choice.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if choice[i] < n - k + i {
            choice[i] += 1;
            for j in i + 1..k {
                choice[j] = choice[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn u_min_from_rank_sum(r1: f64, n1: usize, n2: usize) -> f64 {
    let u1 = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    let u2 = (n1 * n2) as f64 - u1;
    u1.min(u2)
}

/// Standard normal CDF via the Abramowitz-Stegun erf approximation
/// (|error| < 1.5e-7).
fn normal_cdf(z: f64) -> f64 {
    let x = z / std::f64::consts::SQRT_2;
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf = sign * (1.0 - poly * (-x * x).exp());
    0.5 * (1.0 + erf)
}

/// Two-sided Mann-Whitney U test with midranks for ties.
///
/// Returns `(U, p)` where U = min(U₁, U₂). For combined sizes up to
/// [`EXACT_ENUMERATION_MAX_N`], p is exact: the fraction of all
/// C(n₁+n₂, n₁) group assignments whose min-U is ≤ the observed one.
/// Larger samples use the normal approximation with tie-corrected variance
/// and a continuity correction. Fully degenerate samples (every value
/// identical) give p = 1.0.
pub fn mann_whitney_u(sample_a: &[f64], sample_b: &[f64]) -> Result<(f64, f64), EvalError> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(EvalError::EmptySample);
    }
    let n1 = sample_a.len();
    let n2 = sample_b.len();
    let n = n1 + n2;
    let combined: Vec<f64> = sample_a.iter().chain(sample_b).copied().collect();
    let ranks = midranks(&combined);
    let r1: f64 = ranks[..n1].iter().sum();
    let u = u_min_from_rank_sum(r1, n1, n2);

    if n <= EXACT_ENUMERATION_MAX_N {
        // Enumerate every way to pick which n1 of the n observations form
        // group A; rank values are fixed, only the assignment varies.
        let mut le = 0u64;
        let mut total = 0u64;
        let mut choice: Vec<usize> = (0..n1).collect();
        loop {
            let r: f64 = choice.iter().map(|&i| ranks[i]).sum();
            if u_min_from_rank_sum(r, n1, n2) <= u + 1e-9 {
                le += 1;
            }
            total += 1;
            if !next_combination(&mut choice, n) {
                break;
            }
        }
        return Ok((u, (le as f64 / total as f64).min(1.0)));
    }

    let mean = (n1 * n2) as f64 / 2.0;
    // Tie-corrected variance.
    let mut tie_term = 0.0;
    {
        let mut sorted = combined.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
    }
    let nf = n as f64;
    let var = (n1 * n2) as f64 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    if var <= 0.0 {
        log::warn!("degenerate samples: zero rank variance, p = 1.0");
        return Ok((u, 1.0));
    }
    // Continuity correction toward the mean.
    let z = (u - mean + 0.5) / var.sqrt();
    let p = 2.0 * normal_cdf(z);
    Ok((u, p.min(1.0)))
}

// ---------------------------------------------------------------------------
// Folds
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FoldReport {
    pub fold: usize,
    pub instances: usize,
    pub accuracy: f64,
}

/// Split scored records into `k` near-equal folds (by sorted instance id,
/// contiguous chunks) and compute per-fold accuracy.
pub fn fold_accuracies(scored: &[ScoredRecord], k: usize) -> Result<Vec<FoldReport>, EvalError> {
    if scored.is_empty() || k == 0 {
        return Err(EvalError::MissingData);
    }
    let mut sorted: Vec<&ScoredRecord> = scored.iter().collect();
    sorted.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    let k = k.min(sorted.len());
    let base = sorted.len() / k;
    let extra = sorted.len() % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for fold in 0..k {
        let len = base + usize::from(fold < extra);
        let chunk = &sorted[start..start + len];
        start += len;
        let hits = chunk.iter().filter(|s| s.verdict.matched).count();
        out.push(FoldReport {
            fold,
            instances: chunk.len(),
            accuracy: hits as f64 / chunk.len() as f64,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Error taxonomy
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum ErrorLabel {
    GoldError,
    Ambiguity,
    DirtyDatabaseValue,
    Logic,
    Inaccuracy,
    SemanticCorrect,
    InformationRedundancy,
}

impl ErrorLabel {
    pub const ALL: [ErrorLabel; 7] = [
        ErrorLabel::GoldError,
        ErrorLabel::Ambiguity,
        ErrorLabel::DirtyDatabaseValue,
        ErrorLabel::Logic,
        ErrorLabel::Inaccuracy,
        ErrorLabel::SemanticCorrect,
        ErrorLabel::InformationRedundancy,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorLabel::GoldError => "GoldError",
            ErrorLabel::Ambiguity => "Ambiguity",
            ErrorLabel::DirtyDatabaseValue => "DirtyDatabaseValue",
            ErrorLabel::Logic => "Logic",
            ErrorLabel::Inaccuracy => "Inaccuracy",
            ErrorLabel::SemanticCorrect => "SemanticCorrect",
            ErrorLabel::InformationRedundancy => "InformationRedundancy",
        }
    }

    pub fn parse(s: &str) -> Result<Self, EvalError> {
        Self::ALL
            .iter()
            .find(|l| l.as_str() == s)
            .copied()
            .ok_or_else(|| EvalError::UnknownLabel(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ErrorReport {
    pub failures: usize,
    /// Label name → (count, percentage of failures). "Unlabeled" collects
    /// failures without an annotation.
    pub distribution: BTreeMap<String, (usize, f64)>,
    /// Label name → failing instance ids.
    pub listing: BTreeMap<String, Vec<String>>,
}

impl ErrorReport {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Error type | Count | Share |\n|---|---|---|\n");
        for (label, (count, pct)) in &self.distribution {
            let _ = writeln!(out, "| {label} | {count} | {pct:.1}% |");
        }
        let _ = writeln!(out, "\nTotal failures: {}", self.failures);
        out
    }
}

/// Aggregate human-assigned error labels over failed records.
///
/// `outcomes` maps instance id → whether the instance passed; labels are
/// accepted only on failures (a label on a passing instance is rejected).
pub fn error_report(
    outcomes: &BTreeMap<String, bool>,
    labels: &BTreeMap<String, String>,
) -> Result<ErrorReport, EvalError> {
    for id in labels.keys() {
        if outcomes.get(id).copied() == Some(true) {
            return Err(EvalError::LabelOnSuccess(id.clone()));
        }
    }
    let mut distribution: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    let mut listing: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut failures = 0usize;
    for (id, passed) in outcomes {
        if *passed {
            continue;
        }
        failures += 1;
        let label = match labels.get(id) {
            Some(raw) => ErrorLabel::parse(raw)?.as_str().to_string(),
            None => "Unlabeled".to_string(),
        };
        distribution.entry(label.clone()).or_default().0 += 1;
        listing.entry(label).or_default().push(id.clone());
    }
    for (count, pct) in distribution.values_mut() {
        *pct = *count as f64 / failures as f64 * 100.0;
    }
    Ok(ErrorReport {
        failures,
        distribution,
        listing,
    })
}

/// Convenience: outcome map from records scored by [`score_records`].
pub fn outcome_map(scored: &[ScoredRecord]) -> BTreeMap<String, bool> {
    scored
        .iter()
        .map(|s| (s.instance_id.clone(), s.verdict.matched))
        .collect()
}

/// Translate a verdict into the run outcome recorded per instance.
pub fn verdict_outcome(verdict: &ComparisonVerdict) -> Outcome {
    if verdict.matched {
        Outcome::Correct
    } else if verdict.reason == VerdictReason::PredError {
        Outcome::Nonexecutable
    } else {
        Outcome::Incorrect
    }
}
