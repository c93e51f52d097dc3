//! Consensus-based multi-agent text-to-SQL engine.
//!
//! A writer agent drafts a SQL query, debugs it against the database until it
//! executes, and then negotiates with a panel of generated reviewer agents
//! until two consecutive writer queries agree. The crate also ships the
//! surrounding machinery: prompt templates, a read-only SQLite sandbox, a
//! dataframe-DSL to SQL transpiler with an interpreter oracle, k-shot example
//! selection, benchmark loaders, and an execution-accuracy evaluator with a
//! Mann-Whitney U significance test.

pub mod cli;
pub mod datasets;
pub mod evaluator;
pub mod llm;
pub mod orchestrator;
pub mod prompts;
pub mod sandbox;
pub mod selector;
pub mod transpiler;
pub mod types;

pub use types::{
    AgentMessage, Author, CellValue, DatabaseSchema, DialogueHistory, ResultTable,
    ReviewerProfile, Role, RunConfig, RunRecord, SqlQuery, TaskInstance, WriterMode,
};
