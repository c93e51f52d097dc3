//! The consensus run loop: a writer agent drafts SQL, an inner debug loop
//! repairs it against execution errors, and a panel of reviewer agents
//! critiques the query and its execution result until the writer reproduces
//! its own SQL (consensus) or a turn cap is hit.

use std::collections::BTreeMap;

use crate::llm::{ChatBackend, ChatRequest, LlmError, WireMessage};
use crate::prompts::{
    self, extract_fenced, truncate_history, Bindings, TemplateName,
};
use crate::sandbox::{self, DatabaseCatalog, ExecError, ExecutionOutcome};
use crate::transpiler;
use crate::types::{
    AgentMessage, Author, DatabaseSchema, DialogueHistory, ResultTable, ReviewerProfile, Role,
    RunConfig, RunRecord, SqlQuery, TaskInstance, Termination, WriterMode,
};

/// Upper bound on generated tokens per call; generous for SQL-sized replies.
const MAX_OUTPUT_TOKENS: u32 = 1024;
/// Cell width cap when rendering execution results into prompts.
const RENDER_CELL_CHARS: usize = 80;

/// Professions used when the invitation call cannot produce a parseable
/// panel.
const DEFAULT_PROFESSIONS: [&str; 3] = [
    "Senior Database Engineer specialized in writing various clauses",
    "Senior Database Engineer specialized in writing filtering conditions",
    "Data Analyst familiar with the database domain",
];

/// Mutable state of one run: turn counters, the current query, the dialogue
/// history, the latest execution result, and the reviewer panel.
#[derive(Debug, Clone)]
pub struct LoopState {
    /// Review turn counter (i).
    pub review_turn: usize,
    /// Debug corrections issued so far, across the whole run.
    pub debug_turns: usize,
    pub current_sql: SqlQuery,
    pub history: DialogueHistory,
    pub last_result: Option<ResultTable>,
    pub panel: Vec<ReviewerProfile>,
}

/// One comment per panel member, in panel order. Failed reviewer calls are
/// recorded as placeholders so the bundle never shrinks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReviewBundle {
    pub comments: Vec<String>,
}

/// Outcome of the inner debug loop.
#[derive(Debug)]
pub enum DebugResult {
    Table(ResultTable),
    /// All correction attempts spent; carries the last execution error.
    Exhausted(ExecError),
}

/// A demonstration pair placed in the writer prompt.
#[derive(Debug, Clone)]
pub struct Shot {
    pub question: String,
    pub sql: String,
}

/// Wires the collaborators of a run together. Shared read-only across
/// worker threads; all per-run state lives in [`LoopState`].
pub struct Runner<'a> {
    pub client: &'a dyn ChatBackend,
    pub catalog: &'a DatabaseCatalog,
    pub config: &'a RunConfig,
    pub model_name: &'a str,
}

impl<'a> Runner<'a> {
    fn chat(
        &self,
        messages: Vec<WireMessage>,
        llm_calls: &mut usize,
    ) -> Result<String, LlmError> {
        *llm_calls += 1;
        let response = self.client.complete(&ChatRequest {
            messages,
            temperature: self.config.temperature,
            max_output_tokens: MAX_OUTPUT_TOKENS,
            model_name: self.model_name.to_string(),
        })?;
        Ok(response.content)
    }

    /// Truncate the history to budget, then query the writer over it. The
    /// reply is not appended here.
    fn query_writer(
        &self,
        history: &mut DialogueHistory,
        llm_calls: &mut usize,
    ) -> Result<String, LlmError> {
        match truncate_history(history) {
            Ok(h) => *history = h,
            Err(e) => return Err(LlmError::Transport(e.to_string())),
        }
        let messages = history
            .messages
            .iter()
            .map(|m| WireMessage::new(m.role.clone(), m.content.clone()))
            .collect();
        self.chat(messages, llm_calls)
    }

    /// Pull a SQL query out of a writer reply.
    ///
    /// A ```sql fence always wins. In program-of-thoughts mode a fenceless
    /// reply is transpiled from its code blocks (the transpilation is
    /// recorded in `notes`). Last resort is a bare SELECT/WITH suffix.
    fn sql_from_reply(
        &self,
        text: &str,
        schema: &DatabaseSchema,
        notes: &mut BTreeMap<String, String>,
    ) -> Option<SqlQuery> {
        let fences = extract_fenced(text, "sql");
        if let Some(last) = fences.last() {
            let trimmed = last.content.trim();
            if !trimmed.is_empty() {
                return Some(SqlQuery::new(trimmed));
            }
        }
        if self.config.mode == WriterMode::Pot {
            if let Ok(program) = transpiler::parse_codeblocks(text) {
                if let Ok(sql) = transpiler::lower_to_sql(&program, schema) {
                    notes.insert(
                        "transpiled_dsl".to_string(),
                        transpiler::pretty_print(&program),
                    );
                    notes.insert("transpiled_sql".to_string(), sql.raw.clone());
                    return Some(sql);
                }
            }
        }
        prompts::extract_final_sql(text).ok()
    }

    /// Generate the reviewer panel: render the invitation, parse the
    /// ```json fence as a flat name→profession object, keep the first `n`
    /// entries in object order. One retry on a malformed reply, then `n`
    /// built-in default professions — a panel is always produced.
    pub fn invite_reviewers(
        &self,
        schema_text: &str,
        question: &str,
        pred_sql: &str,
        n: usize,
        llm_calls: &mut usize,
    ) -> Vec<ReviewerProfile> {
        let n_str = n.to_string();
        let bindings: Bindings = [
            ("n", n_str.as_str()),
            ("schema", schema_text),
            ("question", question),
            ("pred_sql", pred_sql),
        ]
        .into_iter()
        .collect();
        let prompt = prompts::render(TemplateName::Invitation.body(), &bindings)
            .expect("invitation template slots are fixed");
        for attempt in 0..2 {
            let reply = match self.chat(
                vec![WireMessage::new(Role::User, prompt.clone())],
                llm_calls,
            ) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("invitation call failed (attempt {attempt}): {e}");
                    continue;
                }
            };
            if let Some(panel) = parse_panel(&reply, n) {
                return panel;
            }
            log::warn!("invitation reply unparseable (attempt {attempt})");
        }
        (0..n)
            .map(|i| ReviewerProfile {
                handle: format!("R{}", i + 1),
                profession: DEFAULT_PROFESSIONS[i % DEFAULT_PROFESSIONS.len()].to_string(),
            })
            .collect()
    }

    /// Execute the current SQL; on error, feed the engine message back to
    /// the writer and retry with its corrected query, up to
    /// `max_debug_turns` corrections.
    pub fn debug_loop(
        &self,
        state: &mut LoopState,
        db_id: &str,
        schema: &DatabaseSchema,
        llm_calls: &mut usize,
        notes: &mut BTreeMap<String, String>,
    ) -> Result<DebugResult, LlmError> {
        let mut corrections = 0usize;
        loop {
            let outcome = sandbox::execute(
                self.catalog,
                db_id,
                &state.current_sql,
                self.config.sql_timeout,
                self.config.render_row_cap,
            )
            .unwrap_or_else(|e| {
                ExecutionOutcome::Error(ExecError {
                    kind: sandbox::ExecErrorKind::Other,
                    message: e.to_string(),
                })
            });
            match outcome {
                ExecutionOutcome::Table(table) => {
                    state.last_result = Some(table.clone());
                    return Ok(DebugResult::Table(table));
                }
                ExecutionOutcome::Error(err) => {
                    if corrections >= self.config.max_debug_turns {
                        return Ok(DebugResult::Exhausted(err));
                    }
                    let bindings: Bindings =
                        [("error", err.message.as_str())].into_iter().collect();
                    let feedback = prompts::render(TemplateName::DebugFeedback.body(), &bindings)
                        .expect("debug template slots are fixed");
                    state.history.push(AgentMessage::new(
                        Role::User,
                        Author::Environment,
                        feedback,
                    ));
                    let reply = self.query_writer(&mut state.history, llm_calls)?;
                    state.history.push(AgentMessage::new(
                        Role::Assistant,
                        Author::Writer,
                        reply.clone(),
                    ));
                    match self.sql_from_reply(&reply, schema, notes) {
                        Some(sql) => state.current_sql = sql,
                        None => {
                            notes.insert(
                                format!("no_sql_in_debug_reply_{}", state.debug_turns + 1),
                                "correction reply had no SQL; retrying previous query"
                                    .to_string(),
                            );
                        }
                    }
                    corrections += 1;
                    state.debug_turns += 1;
                }
            }
        }
    }

    /// One review turn: every panel member independently sees the question,
    /// the schema, the current SQL, and the rendered execution result; the
    /// merged comments go into the history and the writer revises.
    ///
    /// Returns the bundle, the revised query, and whether the revision was
    /// an unparseable reply treated as a repetition of the current query.
    pub fn review_turn(
        &self,
        state: &mut LoopState,
        schema_text: &str,
        question: &str,
        schema: &DatabaseSchema,
        llm_calls: &mut usize,
        notes: &mut BTreeMap<String, String>,
    ) -> Result<(ReviewBundle, SqlQuery, bool), LlmError> {
        let table = state
            .last_result
            .as_ref()
            .expect("review turn requires an execution result");
        let rendered = sandbox::render_table(table, self.config.render_row_cap, RENDER_CELL_CHARS);
        let bindings: Bindings = [
            ("schema", schema_text),
            ("question", question),
            ("pred_sql", state.current_sql.raw.as_str()),
            ("result_table", rendered.as_str()),
        ]
        .into_iter()
        .collect();
        let prompt = prompts::render(TemplateName::ReviewerComment.body(), &bindings)
            .expect("reviewer template slots are fixed");
        let mut comments = Vec::with_capacity(state.panel.len());
        for reviewer in &state.panel {
            let messages = vec![
                WireMessage::new(Role::System, format!("You are a {}.", reviewer.profession)),
                WireMessage::new(Role::User, prompt.clone()),
            ];
            match self.chat(messages, llm_calls) {
                Ok(comment) => comments.push(comment),
                Err(e) => {
                    log::warn!("reviewer {} call failed: {e}", reviewer.handle);
                    comments.push("(no comment)".to_string());
                }
            }
        }
        let merged = state
            .panel
            .iter()
            .zip(&comments)
            .map(|(r, c)| format!("Reviewer {} ({}):\n{}", r.handle, r.profession, c))
            .collect::<Vec<_>>()
            .join("\n\n");
        state
            .history
            .push(AgentMessage::new(Role::User, Author::Environment, merged));
        let reply = self.query_writer(&mut state.history, llm_calls)?;
        state.history.push(AgentMessage::new(
            Role::Assistant,
            Author::Writer,
            reply.clone(),
        ));
        let (revised, repeated) = match self.sql_from_reply(&reply, schema, notes) {
            Some(sql) => (sql, false),
            None => (state.current_sql.clone(), true),
        };
        Ok((ReviewBundle { comments }, revised, repeated))
    }

    /// Run one instance end to end and record everything.
    ///
    /// The initial draft comes from the mode's writer prompt with the
    /// supplied demonstrations; the draft is debugged against execution,
    /// then review turns alternate with debugging until the writer
    /// reproduces its own (normalized) SQL, the review cap is hit, or
    /// debugging is exhausted. Client errors never panic: they terminate
    /// the record with `client_error`.
    pub fn run(
        &self,
        instance: &TaskInstance,
        schema: &DatabaseSchema,
        shots: &[Shot],
    ) -> RunRecord {
        let mut notes = BTreeMap::new();
        let mut llm_calls = 0usize;
        let schema_text = prompts::serialize_schema(schema, None);
        let related_sql = render_shots(shots);
        let evidence = instance.evidence.clone().unwrap_or_default();
        let template = match self.config.mode {
            WriterMode::Cot => TemplateName::CotWriter,
            WriterMode::Pot => TemplateName::PotWriter,
        };
        let bindings: Bindings = [
            ("evidence", evidence.as_str()),
            ("question", instance.question.as_str()),
            ("related_sql", related_sql.as_str()),
            ("schema", schema_text.as_str()),
        ]
        .into_iter()
        .collect();
        let opening = prompts::render(template.body(), &bindings)
            .expect("writer template slots are fixed");

        let mut state = LoopState {
            review_turn: 0,
            debug_turns: 0,
            current_sql: SqlQuery::new(""),
            history: DialogueHistory::new(self.config.history_budget),
            last_result: None,
            panel: Vec::new(),
        };
        state
            .history
            .push(AgentMessage::new(Role::User, Author::Environment, opening));

        let finish = |state: LoopState, termination, notes, llm_calls| RunRecord {
            instance_id: instance.id.clone(),
            db_id: instance.db_id.clone(),
            gold_sql: instance.gold_sql.clone(),
            transcript: state.history,
            debug_turns_used: state.debug_turns,
            review_turns_used: state.review_turn,
            final_sql: state.current_sql,
            termination,
            outcome: None,
            error_label: None,
            notes,
            llm_calls,
        };

        let reply = match self.query_writer(&mut state.history, &mut llm_calls) {
            Ok(r) => r,
            Err(e) => {
                notes.insert("client_error".to_string(), e.to_string());
                return finish(state, Termination::ClientError, notes, llm_calls);
            }
        };
        state.history.push(AgentMessage::new(
            Role::Assistant,
            Author::Writer,
            reply.clone(),
        ));
        match self.sql_from_reply(&reply, schema, &mut notes) {
            Some(sql) => state.current_sql = sql,
            None => {
                notes.insert(
                    "no_sql_found_initial".to_string(),
                    "first reply had no extractable SQL; executing it verbatim".to_string(),
                );
                state.current_sql = SqlQuery::new(reply.trim());
            }
        }

        match self.debug_loop(&mut state, &instance.db_id, schema, &mut llm_calls, &mut notes) {
            Ok(DebugResult::Table(_)) => {}
            Ok(DebugResult::Exhausted(err)) => {
                notes.insert("last_exec_error".to_string(), err.message);
                return finish(state, Termination::DebugExhausted, notes, llm_calls);
            }
            Err(e) => {
                notes.insert("client_error".to_string(), e.to_string());
                return finish(state, Termination::ClientError, notes, llm_calls);
            }
        }

        if self.config.max_review_turns > 0 && self.config.n_reviewers > 0 {
            state.panel = self.invite_reviewers(
                &schema_text,
                &instance.question,
                &state.current_sql.raw,
                self.config.n_reviewers,
                &mut llm_calls,
            );
        }

        let mut termination = Termination::ReviewCap;
        for turn in 1..=self.config.max_review_turns {
            let (_bundle, revised, repeated) = match self.review_turn(
                &mut state,
                &schema_text,
                &instance.question,
                schema,
                &mut llm_calls,
                &mut notes,
            ) {
                Ok(r) => r,
                Err(e) => {
                    notes.insert("client_error".to_string(), e.to_string());
                    return finish(state, Termination::ClientError, notes, llm_calls);
                }
            };
            state.review_turn = turn;
            if repeated {
                notes.insert(
                    format!("no_sql_in_review_reply_{turn}"),
                    "revision reply had no SQL; treated as repeating the current query"
                        .to_string(),
                );
            }
            let agreed = state.current_sql.agrees_with(&revised);
            state.current_sql = revised;
            if agreed {
                termination = Termination::Consensus;
                break;
            }
            match self.debug_loop(&mut state, &instance.db_id, schema, &mut llm_calls, &mut notes)
            {
                Ok(DebugResult::Table(_)) => {}
                Ok(DebugResult::Exhausted(err)) => {
                    notes.insert("last_exec_error".to_string(), err.message);
                    termination = Termination::DebugExhausted;
                    break;
                }
                Err(e) => {
                    notes.insert("client_error".to_string(), e.to_string());
                    return finish(state, Termination::ClientError, notes, llm_calls);
                }
            }
        }
        finish(state, termination, notes, llm_calls)
    }
}

/// Parse a panel reply: the last ```json fence as a flat string→string
/// object, first `n` entries in object order. Keys like "Reviewer XY"
/// shorten to the handle "XY".
fn parse_panel(reply: &str, n: usize) -> Option<Vec<ReviewerProfile>> {
    let fences = extract_fenced(reply, "json");
    let body = &fences.last()?.content;
    let map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(body).ok()?;
    let mut panel = Vec::new();
    for (key, value) in &map {
        let profession = value.as_str()?;
        let handle = key.strip_prefix("Reviewer ").unwrap_or(key).to_string();
        panel.push(ReviewerProfile {
            handle,
            profession: profession.to_string(),
        });
        if panel.len() == n {
            break;
        }
    }
    if panel.is_empty() {
        None
    } else {
        Some(panel)
    }
}

fn render_shots(shots: &[Shot]) -> String {
    shots
        .iter()
        .map(|s| format!("QUESTION: {}\nSQL: {}", s.question, s.sql))
        .collect::<Vec<_>>()
        .join("\n\n")
}
