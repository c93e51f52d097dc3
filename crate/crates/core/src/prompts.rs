//! Prompt templates, schema serialization, fenced-block extraction, and
//! history truncation.
//!
//! Template bodies live as UTF-8 text assets with `{slot}` markers so the
//! golden-file suite pins their bytes independently of the code.

use std::collections::BTreeMap;

use crate::types::{estimate_tokens, DatabaseSchema, DialogueHistory, ResultTable, SqlQuery};

pub const COT_WRITER: &str = include_str!("../assets/prompts/cot_writer.txt");
pub const POT_WRITER: &str = include_str!("../assets/prompts/pot_writer.txt");
pub const INVITATION: &str = include_str!("../assets/prompts/invitation.txt");
pub const REVIEWER_COMMENT: &str = include_str!("../assets/prompts/reviewer_comment.txt");
pub const DEBUG_FEEDBACK: &str = include_str!("../assets/prompts/debug_feedback.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateName {
    CotWriter,
    PotWriter,
    Invitation,
    ReviewerComment,
    DebugFeedback,
}

impl TemplateName {
    pub fn body(&self) -> &'static str {
        match self {
            TemplateName::CotWriter => COT_WRITER,
            TemplateName::PotWriter => POT_WRITER,
            TemplateName::Invitation => INVITATION,
            TemplateName::ReviewerComment => REVIEWER_COMMENT,
            TemplateName::DebugFeedback => DEBUG_FEEDBACK,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PromptError {
    #[error("unbound slot `{0}`")]
    UnboundSlot(String),
    #[error("history budget {budget} is below the minimum {needed} (first user header + last message)")]
    BudgetTooSmall { budget: usize, needed: usize },
}

/// Slot bindings for [`render`]. Missing slots are an error; binding a slot
/// to the empty string is fine (0-shot leaves `related_sql` empty).
pub type Bindings<'a> = BTreeMap<&'static str, &'a str>;

/// Render a template body, substituting `{slot}` markers left to right.
///
/// A `{word}` sequence whose word is a lowercase identifier must be bound;
/// anything else (JSON braces in examples, for instance) passes through
/// verbatim. Rendering is pure: same bindings, identical bytes.
pub fn render(template: &str, bindings: &Bindings) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len());
    let bytes = template.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            if let Some(end) = slot_end(bytes, i) {
                let name = &template[i + 1..end];
                match bindings.get(name) {
                    Some(v) => out.push_str(v),
                    None => return Err(PromptError::UnboundSlot(name.to_string())),
                }
                i = end + 1;
                continue;
            }
        }
        let ch_len = utf8_len(bytes[i]);
        out.push_str(&template[i..i + ch_len]);
        i += ch_len;
    }
    Ok(out)
}

/// `{name}` where name matches `[a-z_][a-z0-9_]*`; returns index of `}`.
fn slot_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut j = start + 1;
    if j >= bytes.len() || !(bytes[j].is_ascii_lowercase() || bytes[j] == b'_') {
        return None;
    }
    while j < bytes.len() {
        match bytes[j] {
            b'a'..=b'z' | b'0'..=b'9' | b'_' => j += 1,
            b'}' => return Some(j),
            _ => return None,
        }
    }
    None
}

fn utf8_len(first: u8) -> usize {
    match first {
        b if b < 0x80 => 1,
        b if b >= 0xF0 => 4,
        b if b >= 0xE0 => 3,
        _ => 2,
    }
}

/// Serialize a schema as CREATE-TABLE-style text for the
/// `### DATABASE STRUCTURE:` slot. One block per table in catalog order,
/// primary keys and foreign keys annotated as trailing comments, plus an
/// optional sample-rows section.
pub fn serialize_schema(
    schema: &DatabaseSchema,
    sample_rows: Option<&BTreeMap<String, ResultTable>>,
) -> String {
    let mut out = String::new();
    for (ti, table) in schema.tables.iter().enumerate() {
        if ti > 0 {
            out.push('\n');
        }
        out.push_str(&format!("CREATE TABLE {} (\n", table.name));
        let ncols = table.columns.len();
        for (ci, col) in table.columns.iter().enumerate() {
            out.push_str(&format!("  {} {}", col.name, col.decl_type));
            if ci + 1 < ncols {
                out.push(',');
            }
            if col.is_primary_key {
                out.push_str(" -- primary key");
            }
            out.push('\n');
        }
        out.push_str(");\n");
        for fk in schema
            .foreign_keys
            .iter()
            .filter(|fk| fk.from_table == table.name)
        {
            out.push_str(&format!(
                "-- {}.{} references {}.{}\n",
                fk.from_table, fk.from_column, fk.to_table, fk.to_column
            ));
        }
        if let Some(samples) = sample_rows {
            if let Some(rows) = samples.get(&table.name) {
                if !rows.rows.is_empty() {
                    out.push_str("-- sample rows:\n");
                    for row in rows.rows.iter().take(3) {
                        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
                        out.push_str(&format!("-- ({})\n", cells.join(", ")));
                    }
                }
            }
        }
    }
    // Drop the final newline so the text embeds cleanly in a slot.
    if out.ends_with('\n') {
        out.pop();
    }
    out
}

/// One fenced block extracted from assistant text.
#[derive(Debug, Clone, PartialEq)]
pub struct FencedBlock {
    pub content: String,
    /// False when the final fence never closed; content runs to end of text.
    pub closed: bool,
}

/// Extract the contents of every ```tag ... ``` fence, in order. Tag match is
/// case-insensitive. An empty `language_tag` matches untagged fences.
pub fn extract_fenced(text: &str, language_tag: &str) -> Vec<FencedBlock> {
    let mut blocks = Vec::new();
    let mut rest = text;
    loop {
        let Some(open) = rest.find("```") else { break };
        let after_open = &rest[open + 3..];
        let (tag, body_start) = match after_open.find('\n') {
            Some(nl) => (after_open[..nl].trim(), nl + 1),
            None => (after_open.trim(), after_open.len()),
        };
        let body = &after_open[body_start..];
        let (content, closed, consumed) = match body.find("```") {
            Some(close) => (&body[..close], true, body_start + close + 3),
            None => (body, false, after_open.len()),
        };
        if tag.eq_ignore_ascii_case(language_tag) {
            let content = content.strip_suffix('\n').unwrap_or(content);
            blocks.push(FencedBlock {
                content: content.to_string(),
                closed,
            });
        }
        rest = &after_open[consumed.min(after_open.len())..];
    }
    blocks
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("no SQL found in assistant text")]
pub struct NoSqlFound;

/// Pull the final SQL out of assistant text: the last ```sql fence wins; with
/// no fence, the suffix starting at the first SELECT/WITH keyword is taken.
pub fn extract_final_sql(assistant_text: &str) -> Result<SqlQuery, NoSqlFound> {
    let fences = extract_fenced(assistant_text, "sql");
    if let Some(last) = fences.last() {
        let trimmed = last.content.trim();
        if !trimmed.is_empty() {
            return Ok(SqlQuery::new(trimmed));
        }
    }
    if let Some(pos) = find_keyword(assistant_text, &["select", "with"]) {
        return Ok(SqlQuery::new(assistant_text[pos..].trim()));
    }
    Err(NoSqlFound)
}

/// First occurrence of any keyword as a standalone word, case-insensitive.
fn find_keyword(text: &str, keywords: &[&str]) -> Option<usize> {
    let lower = text.to_lowercase();
    let bytes = lower.as_bytes();
    let is_word = |b: u8| b.is_ascii_alphanumeric() || b == b'_';
    let mut best: Option<usize> = None;
    for kw in keywords {
        let mut from = 0;
        while let Some(rel) = lower[from..].find(kw) {
            let pos = from + rel;
            let before_ok = pos == 0 || !is_word(bytes[pos - 1]);
            let after = pos + kw.len();
            let after_ok = after >= bytes.len() || !is_word(bytes[after]);
            if before_ok && after_ok {
                best = Some(best.map_or(pos, |b: usize| b.min(pos)));
                break;
            }
            from = pos + 1;
        }
    }
    best
}

/// Shrink a history to its token budget.
///
/// Eviction order: the oldest message that is neither the first user message
/// nor one of the last four; then, if needed, the schema tail of the first
/// user message is cut; as a last resort older messages among the protected
/// tail go too (the final message always stays).
pub fn truncate_history(history: &DialogueHistory) -> Result<DialogueHistory, PromptError> {
    let mut h = history.clone();
    let budget = h.budget;
    if h.messages.is_empty() {
        return Ok(h);
    }
    let last_tokens = h.messages.last().map(|m| m.token_estimate).unwrap_or(0);
    let header_tokens = h
        .first_user_index()
        .map(|i| estimate_tokens(first_line(&h.messages[i].content)))
        .unwrap_or(0);
    let needed = header_tokens + last_tokens;
    if budget < needed {
        return Err(PromptError::BudgetTooSmall { budget, needed });
    }
    if h.token_sum() < budget {
        return Ok(h);
    }

    // Phase 1: evict the oldest unprotected message.
    loop {
        if h.token_sum() < budget {
            return Ok(h);
        }
        let first_user = h.first_user_index();
        let protected_from = h.messages.len().saturating_sub(4);
        let victim = (0..h.messages.len())
            .find(|&i| Some(i) != first_user && i < protected_from);
        match victim {
            Some(i) => {
                h.messages.remove(i);
            }
            None => break,
        }
    }

    // Phase 2: hard-truncate the first user message (the schema section sits
    // at its tail) down to at least its first line.
    if let Some(fu) = h.first_user_index() {
        if h.token_sum() > budget {
            let others: usize = h
                .messages
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != fu)
                .map(|(_, m)| m.token_estimate)
                .sum();
            let allowed_tokens = budget.saturating_sub(others);
            let msg = &mut h.messages[fu];
            let header_len = first_line(&msg.content).len();
            let mut cut = (allowed_tokens * 4).clamp(header_len, msg.content.len());
            while !msg.content.is_char_boundary(cut) {
                cut -= 1;
            }
            msg.content.truncate(cut);
            msg.token_estimate = estimate_tokens(&msg.content).max(1);
        }
    }

    // Phase 3: if the protected tail alone still overflows, drop its oldest
    // members, keeping the first user message and the final message.
    while h.token_sum() > budget && h.messages.len() > 1 {
        let first_user = h.first_user_index();
        let victim = (0..h.messages.len() - 1).find(|&i| Some(i) != first_user);
        match victim {
            Some(i) => {
                h.messages.remove(i);
            }
            None => break,
        }
    }
    Ok(h)
}

fn first_line(s: &str) -> &str {
    s.lines().next().unwrap_or("")
}
