//! Corpus files and seeded fixed-length context sampling.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{rng, Stream};

use super::tokenizer::tokenize;

/// Reads a corpus file as byte-level tokens.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::EmptyInput("corpus file"));
    }
    Ok(tokenize(&bytes))
}

/// Draws windows of exactly `context_length` tokens with start positions
/// uniform over every valid offset, independently per draw.
#[derive(Debug, Clone)]
pub struct ContextSampler<'a> {
    tokens: &'a [u32],
    context_length: usize,
    rng: ChaCha8Rng,
}

impl<'a> ContextSampler<'a> {
    pub fn new(tokens: &'a [u32], context_length: usize, seed: u64) -> Result<Self> {
        if context_length < 2 {
            return Err(Error::config("context_length", "must be at least 2"));
        }
        if tokens.len() < context_length {
            return Err(Error::config(
                "context_length",
                format!(
                    "corpus has {} tokens, fewer than one context of {context_length}",
                    tokens.len()
                ),
            ));
        }
        Ok(Self {
            tokens,
            context_length,
            rng: rng(seed, Stream::Contexts),
        })
    }

    /// Number of distinct windows.
    pub fn positions(&self) -> usize {
        self.tokens.len() - self.context_length + 1
    }

    pub fn next_start(&mut self) -> usize {
        self.rng.random_range(0..self.positions())
    }
}

impl<'a> Iterator for ContextSampler<'a> {
    type Item = &'a [u32];

    fn next(&mut self) -> Option<&'a [u32]> {
        let start = self.next_start();
        Some(&self.tokens[start..start + self.context_length])
    }
}

/// Seeded contexts from `path`; see [`ContextSampler`].
pub fn ingest_corpus(
    path: impl AsRef<Path>,
    context_length: usize,
    seed: u64,
) -> Result<impl Iterator<Item = Vec<u32>>> {
    let tokens = read_corpus(path)?;
    ContextSampler::new(&tokens, context_length, seed)?;
    let mut rng = rng(seed, Stream::Contexts);
    let positions = tokens.len() - context_length + 1;
    Ok(std::iter::repeat_with(move || {
        let start = rng.random_range(0..positions);
        tokens[start..start + context_length].to_vec()
    }))
}

/// Splits `tokens` into consecutive non-overlapping windows of `len` tokens,
/// dropping a short tail.
pub fn chunks(tokens: &[u32], len: usize) -> Vec<Vec<u32>> {
    tokens.chunks_exact(len).map(<[u32]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_length_corpus_has_one_window() {
        let tokens = [1, 2, 3, 4];
        let mut s = ContextSampler::new(&tokens, 4, 9).unwrap();
        assert_eq!(s.positions(), 1);
        assert_eq!(s.next().unwrap(), tokens);
    }

    #[test]
    fn short_corpus_is_rejected() {
        assert!(matches!(
            ContextSampler::new(&[1, 2], 3, 0),
            Err(Error::InvalidConfig {
                field: "context_length",
                ..
            })
        ));
    }

    #[test]
    fn file_and_slice_samplers_agree() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, b"the quick brown fox jumps over the lazy dog").unwrap();
        let tokens = read_corpus(&path).unwrap();
        let a: Vec<Vec<u32>> = ContextSampler::new(&tokens, 5, 3)
            .unwrap()
            .take(20)
            .map(<[u32]>::to_vec)
            .collect();
        let b: Vec<Vec<u32>> = ingest_corpus(&path, 5, 3).unwrap().take(20).collect();
        assert_eq!(a, b);
    }
}
