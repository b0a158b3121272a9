//! Agent orchestration kernel: a bounded model/tool loop with pluggable
//! extensions, hierarchical working memory, history compression, persistent
//! notes, coding tools, an evaluation harness and a self-improvement loop.

pub mod catalog;
pub mod codec;
pub mod compress;
pub mod config;
pub mod extension;
pub mod harness;
pub mod llm;
pub mod memory;
pub mod message;
pub mod meta;
pub mod notes;
pub mod orchestrator;
pub mod outline;
pub mod prompts;
pub mod tokens;
pub mod tools;
pub mod trajectory;
