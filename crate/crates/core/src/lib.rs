//! Event extraction from speech transcripts: a presence gate, retrieval-augmented
//! LLM prompting for triggers and arguments, output repair, and exact-match scoring.

pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod extract;
pub mod gate;
pub mod http;
pub mod llm;
pub mod model;
pub mod pipeline;
pub mod prompts;
pub mod retrieval;

pub use error::{Error, Result};
