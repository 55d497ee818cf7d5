//! Everything that crosses the process boundary: tokenizer, corpora, checkpoints.

pub mod checkpoint;
pub mod corpus;
pub mod tokenizer;
