//! Seeded formal-language corpus with long-range copy dependencies.
//!
//! Each record is one line:
//!
//! ```text
//! KEY ':' MOTIF{repeats} '=' KEY '\n'
//! ```
//!
//! `KEY` is `key_len` letters drawn uniformly from `a..=p`, `MOTIF` is a
//! `motif_min..=motif_max` long run of digits repeated
//! `repeats_min..=repeats_max` times. After the `=` the key must be copied
//! from the start of the line, which is only possible by remembering tokens
//! from well before the copy starts. The motif repeats give a
//! shorter-range regularity. Training text comes from [`Stream::Corpus`],
//! held-out text and cloze items from [`Stream::Validation`], so the two
//! splits never share a draw.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::tokenizer::tokenize;
use crate::rng::{rng, Stream};

use super::ClozeItem;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CopyCorpusSpec {
    pub train_records: usize,
    pub validation_records: usize,
    pub cloze_items: usize,
    pub key_len: usize,
    pub motif_min: usize,
    pub motif_max: usize,
    pub repeats_min: usize,
    pub repeats_max: usize,
    pub seed: u64,
}

impl Default for CopyCorpusSpec {
    fn default() -> Self {
        Self {
            train_records: 4000,
            validation_records: 400,
            cloze_items: 200,
            key_len: 5,
            motif_min: 2,
            motif_max: 3,
            repeats_min: 2,
            repeats_max: 6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Vec<u8>,
    pub validation: Vec<u8>,
    /// Predict one copied key letter from the line prefix before it.
    pub cloze: Vec<ClozeItem>,
}

struct Record {
    text: Vec<u8>,
    /// Offset of the first copied key letter.
    copy_start: usize,
}

fn record(rng: &mut ChaCha8Rng, spec: &CopyCorpusSpec) -> Record {
    let key: Vec<u8> = (0..spec.key_len)
        .map(|_| b'a' + rng.random_range(0..16u8))
        .collect();
    let motif_len = rng.random_range(spec.motif_min..=spec.motif_max);
    let motif: Vec<u8> = (0..motif_len)
        .map(|_| b'0' + rng.random_range(0..10u8))
        .collect();
    let repeats = rng.random_range(spec.repeats_min..=spec.repeats_max);
    let mut text = key.clone();
    text.push(b':');
    for _ in 0..repeats {
        text.extend_from_slice(&motif);
    }
    text.push(b'=');
    let copy_start = text.len();
    text.extend_from_slice(&key);
    text.push(b'\n');
    Record { text, copy_start }
}

impl CopyCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.key_len < 1 {
            return Err(Error::config("key_len", "must be at least 1"));
        }
        if self.motif_min < 1 || self.motif_min > self.motif_max {
            return Err(Error::config(
                "motif_min",
                "need 1 <= motif_min <= motif_max",
            ));
        }
        if self.repeats_min < 1 || self.repeats_min > self.repeats_max {
            return Err(Error::config(
                "repeats_min",
                "need 1 <= repeats_min <= repeats_max",
            ));
        }
        if self.train_records == 0 || self.validation_records == 0 {
            return Err(Error::config(
                "train_records",
                "both splits need at least one record",
            ));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<SyntheticCorpus> {
        self.validate()?;
        let mut train_rng = rng(self.seed, Stream::Corpus);
        let mut train = Vec::new();
        for _ in 0..self.train_records {
            train.extend(record(&mut train_rng, self).text);
        }
        let mut held_rng = rng(self.seed, Stream::Validation);
        let mut validation = Vec::new();
        for _ in 0..self.validation_records {
            validation.extend(record(&mut held_rng, self).text);
        }
        let cloze = (0..self.cloze_items)
            .map(|_| {
                let r = record(&mut held_rng, self);
                let at = r.copy_start + held_rng.random_range(0..self.key_len);
                ClozeItem {
                    context: tokenize(&r.text[..at]),
                    answer: u32::from(r.text[at]),
                }
            })
            .collect();
        Ok(SyntheticCorpus {
            train,
            validation,
            cloze,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_reproducible_and_well_formed() {
        let spec = CopyCorpusSpec {
            train_records: 50,
            validation_records: 10,
            cloze_items: 10,
            ..CopyCorpusSpec::default()
        };
        let a = spec.generate().unwrap();
        assert_eq!(a, spec.generate().unwrap());
        for line in a.train.split(|b| *b == b'\n').filter(|l| !l.is_empty()) {
            let text = std::str::from_utf8(line).unwrap();
            let (key, rest) = text.split_once(':').unwrap();
            let (_, copy) = rest.split_once('=').unwrap();
            assert_eq!(key, copy);
        }
        for item in &a.cloze {
            let key = &item.context[..spec.key_len];
            let eq = item
                .context
                .iter()
                .position(|t| *t == u32::from(b'='))
                .unwrap();
            let offset = item.context.len() - eq - 1;
            assert_eq!(key[offset], item.answer);
        }
        assert_ne!(a.train[..100], a.validation[..100]);
    }
}
