//! Hint-enhanced in-context learning for open-domain QA.
//!
//! Retrieve demonstration examples for a query, ask an LLM to extract a
//! query-related hint from them, prepend that hint to the few-shot prompt, and
//! train a hint-related example retriever (a projection head over frozen
//! embeddings) from hint-derived triplets.

pub mod config;
pub mod embedder;
pub mod eval;
pub mod fixture;
pub mod her_train;
pub mod hints;
pub mod http;
pub mod llm;
pub mod pipeline;
pub mod store;
mod util;

pub use util::sha256_hex;
