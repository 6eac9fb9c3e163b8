//! Execution-based benchmark construction and evaluation.
//!
//! The crate turns harvested code fragments into self-contained evaluation
//! examples (sandboxed context, ground-truth target, generated tests) through
//! an LLM-driven pipeline, and evaluates code generators against the result.

pub mod analysis;
pub mod corpus;
pub mod eval;
pub mod executor;
pub mod llm;
pub mod pipeline;
pub mod python;
pub mod study;
