//! Engine for LLM-enhanced relational operators.

pub mod bench;
pub mod gateway;
pub mod metrics;
pub mod operators;
pub mod plan;
pub mod prompt;
pub mod relation;
pub mod scale_lab;
