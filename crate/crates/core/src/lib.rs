//! Schema-agnostic tabular prediction with in-context learning.
//!
//! Rows are serialized as plain text with canonical cell strings, the most
//! similar training rows are retrieved with hashed character n-gram
//! embeddings, and a text-completion backend fills in the empty target of the
//! query row.

pub mod backend;
pub mod embedder;
pub mod evalkit;
pub mod index;
pub mod numeric;
pub mod predictor;
pub mod serializer;
pub mod table;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
