//! Closed-form parameter counts.

use serde::Serialize;

use crate::autograd::Real;
use crate::error::{Error, Result};
use crate::model::{Aggregation, ModelConfig};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamCountReport {
    pub base_count: u64,
    pub extended_count: u64,
    /// `(extended - base) / base * 100`.
    pub increase_percent: f64,
}

/// A row of the published size comparison: shape, base total and the printed
/// increase for four perspectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublishedRow {
    pub layers: usize,
    pub d_model: usize,
    pub base_total: u64,
    pub printed_increase_percent: f64,
}

/// Vocabulary of the published base models.
pub const PUBLISHED_VOCAB: usize = 50277;

pub const PUBLISHED_ROWS: [PublishedRow; 3] = [
    PublishedRow {
        layers: 12,
        d_model: 768,
        base_total: 169_340_000,
        printed_increase_percent: 0.08,
    },
    PublishedRow {
        layers: 24,
        d_model: 1024,
        base_total: 430_390_000,
        printed_increase_percent: 0.09,
    },
    PublishedRow {
        layers: 24,
        d_model: 2048,
        base_total: 1_515_100_000,
        printed_increase_percent: 0.04,
    },
];

impl PublishedRow {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            d_model: self.d_model,
            vocab: PUBLISHED_VOCAB,
            perspectives: 4,
            aggregation: Aggregation::Weighted,
            ..ModelConfig::default()
        }
    }
}

/// Plain RWKV-v4 count: embedding and unembedding `V d` each (once if tied),
/// per layer `13 d^2` of projections plus decay, bonus and five token-shift
/// vectors, and `2 d` per layer norm (two per layer, plus input and output).
pub fn base_count(config: &ModelConfig) -> u64 {
    let (l, d, v) = (
        config.layers as u64,
        config.d_model as u64,
        config.vocab as u64,
    );
    let tables = if config.tie_embeddings {
        v * d
    } else {
        2 * v * d
    };
    tables + l * (13 * d * d + 7 * d) + 2 * d * (2 * l + 2)
}

/// Reals added on top of the base: `(n - 1)` extra copies of the five
/// token-shift vectors per layer, plus the aggregator's own parameters
/// (`n d + n` selector, `d n d + d` merge, none for averaging). A single
/// perspective adds nothing.
pub fn extra_count(config: &ModelConfig) -> u64 {
    let (n, l, d) = (
        config.perspectives as u64,
        config.layers as u64,
        config.d_model as u64,
    );
    if n <= 1 {
        return 0;
    }
    let replicas = (n - 1) * 5 * d * l;
    let aggregator = match config.aggregation {
        Aggregation::Average => 0,
        Aggregation::Transformer => d * n * d + d,
        Aggregation::Weighted => n * d + n,
    };
    replicas + aggregator
}

fn report(base: u64, extra: u64) -> ParamCountReport {
    ParamCountReport {
        base_count: base,
        extended_count: base + extra,
        increase_percent: extra as f64 / base as f64 * 100.0,
    }
}

/// Analytic count for `config`; nothing is allocated.
pub fn count_parameters(config: &ModelConfig) -> Result<ParamCountReport> {
    config.validate()?;
    Ok(report(base_count(config), extra_count(config)))
}

/// As [`count_parameters`], with the base taken from an externally reported total.
pub fn count_parameters_against(config: &ModelConfig, base_total: u64) -> Result<ParamCountReport> {
    config.validate()?;
    if base_total == 0 {
        return Err(Error::config("base_total", "must be positive"));
    }
    Ok(report(base_total, extra_count(config)))
}

/// Number of reals actually stored.
pub fn count_allocated<F: Real>(store: &ParamStore<F>) -> u64 {
    store.num_elements() as u64
}
