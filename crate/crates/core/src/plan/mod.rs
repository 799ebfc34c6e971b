//! A small SQL dialect for composing LLM operators with classical ones.

mod ast;
mod exec;
mod lexer;
mod parser;

pub use ast::{render_plan, ImputeSpec, Plan, PlanNode};
pub use exec::{execute, ExecError, Execution, TraceEntry};
pub use parser::{parse_plan, parse_plan_checked};

/// Version of the plan grammar documented in docs/plan-grammar.md.
pub const GRAMMAR_VERSION: &str = "1.0";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("{line}:{col}: {message}")]
    Syntax {
        line: usize,
        col: usize,
        message: String,
    },
    #[error("{line}:{col}: unknown relation `{name}`")]
    UnknownRelation {
        line: usize,
        col: usize,
        name: String,
    },
    #[error("{line}:{col}: unknown column `{name}`")]
    UnknownColumn {
        line: usize,
        col: usize,
        name: String,
    },
    #[error("{line}:{col}: {message}")]
    Granularity {
        line: usize,
        col: usize,
        message: String,
    },
    #[error("plan shape not expressible: {0}")]
    Shape(String),
}

impl PlanError {
    /// Source position, when the error has one.
    pub fn position(&self) -> Option<(usize, usize)> {
        match self {
            Self::Syntax { line, col, .. }
            | Self::UnknownRelation { line, col, .. }
            | Self::UnknownColumn { line, col, .. }
            | Self::Granularity { line, col, .. } => Some((*line, *col)),
            Self::Shape(_) => None,
        }
    }
}
