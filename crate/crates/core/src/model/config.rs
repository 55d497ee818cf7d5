use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How perspective embeddings are fused into vocabulary logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// `head(mean(p_i))`.
    Average,
    /// `head(W concat(p_1..p_n) + b)`.
    #[serde(alias = "transformer_like")]
    Transformer,
    /// `sum_i softmax(W mean(p) + b)_i head(p_i)`.
    #[serde(alias = "weighted_softmax")]
    Weighted,
}

impl Aggregation {
    pub const ALL: [Aggregation; 3] = [
        Aggregation::Average,
        Aggregation::Transformer,
        Aggregation::Weighted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Average => "average",
            Aggregation::Transformer => "transformer",
            Aggregation::Weighted => "weighted",
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Aggregation::Average),
            "transformer" | "transformer_like" => Ok(Aggregation::Transformer),
            "weighted" | "weighted_softmax" => Ok(Aggregation::Weighted),
            other => Err(Error::config(
                "aggregation",
                format!("unknown mode `{other}`"),
            )),
        }
    }
}

/// Architecture shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub vocab: usize,
    pub perspectives: usize,
    pub aggregation: Aggregation,
    /// Tokens per training context.
    pub context_length: usize,
    /// Reuse the embedding table as the output projection.
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    /// Desk-scale default.
    fn default() -> Self {
        Self {
            layers: 4,
            d_model: 64,
            vocab: crate::io::tokenizer::VOCAB_SIZE,
            perspectives: 4,
            aggregation: Aggregation::Weighted,
            context_length: 128,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    /// Small shape used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            layers: 2,
            d_model: 8,
            perspectives: 3,
            context_length: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::config("layers", "must be at least 1"));
        }
        if self.d_model < 2 {
            return Err(Error::config("d_model", "must be at least 2"));
        }
        if self.vocab < 2 {
            return Err(Error::config("vocab", "must be at least 2"));
        }
        if self.perspectives < 1 {
            return Err(Error::config("perspectives", "must be at least 1"));
        }
        if self.context_length < 2 {
            return Err(Error::config("context_length", "must be at least 2"));
        }
        Ok(())
    }

    pub fn with_perspectives(&self, n: usize) -> Self {
        Self {
            perspectives: n,
            ..self.clone()
        }
    }

    pub fn with_aggregation(&self, aggregation: Aggregation) -> Self {
        Self {
            aggregation,
            ..self.clone()
        }
    }

    /// Same shape with a single perspective.
    pub fn base(&self) -> Self {
        self.with_perspectives(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_names_the_field() {
        let mut c = ModelConfig::tiny();
        assert!(c.validate().is_ok());
        c.perspectives = 0;
        match c.validate() {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "perspectives"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn aggregation_aliases() {
        assert_eq!(
            "transformer_like".parse::<Aggregation>().unwrap(),
            Aggregation::Transformer
        );
        assert_eq!(
            "weighted_softmax".parse::<Aggregation>().unwrap(),
            Aggregation::Weighted
        );
        assert!("median".parse::<Aggregation>().is_err());
    }
}
