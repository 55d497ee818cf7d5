//! Pre-training of the base model and perspective fine-tuning.

mod log;
mod noise;
mod optim;

use serde::{Deserialize, Serialize};

use crate::autograd::{FreezeMask, Gradients, Graph};
use crate::error::{Error, Result};
use crate::eval::perplexity_contexts;
use crate::io::corpus::ContextSampler;
use crate::model::{expand_store, init_base, sequence_loss, ModelConfig, PerspectiveModel};
use crate::params::{names, ParamStore};

pub use log::{EpochRecord, StepRecord, TrainLog};
pub use noise::{inject_noise, inject_selector_noise, inject_temporal_noise, NoiseTarget};
pub use optim::{clip_global_norm, global_norm, lr_schedule, Adam};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub mini_epochs: usize,
    pub contexts_per_mini_epoch: usize,
    /// Held-out contexts scored at the end of every mini-epoch.
    pub validation_contexts: usize,
    pub noise_target: NoiseTarget,
    pub noise_std: f64,
    pub noise_mean: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Fine-tuning defaults.
    fn default() -> Self {
        Self {
            batch_size: 2,
            lr_max: 3e-5,
            lr_min: 1e-5,
            mini_epochs: 4,
            contexts_per_mini_epoch: 2000,
            validation_contexts: 64,
            noise_target: NoiseTarget::Selector,
            noise_std: 0.01,
            noise_mean: 0.0,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Base-model defaults: same loop, higher learning rates.
    pub fn pretrain() -> Self {
        Self {
            lr_max: 1e-3,
            lr_min: 1e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.mini_epochs < 1 {
            return Err(Error::config("mini_epochs", "must be at least 1"));
        }
        if self.contexts_per_mini_epoch < 1 {
            return Err(Error::config(
                "contexts_per_mini_epoch",
                "must be at least 1",
            ));
        }
        if !(self.lr_min > 0.0) || !self.lr_max.is_finite() || self.lr_min > self.lr_max {
            return Err(Error::config("lr_min", "need 0 < lr_min <= lr_max"));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::config(
                "noise_std",
                "must be finite and non-negative",
            ));
        }
        if !self.noise_mean.is_finite() {
            return Err(Error::config("noise_mean", "must be finite"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("grad_clip", "must be positive"));
        }
        Ok(())
    }

    pub fn steps_per_mini_epoch(&self) -> usize {
        self.contexts_per_mini_epoch.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.mini_epochs * self.steps_per_mini_epoch()
    }
}

/// Loss and gradients of one context, trainable parameters only. A
/// non-finite loss comes back as such, with no gradients.
pub fn context_gradients(
    store: &ParamStore<f32>,
    config: &ModelConfig,
    mask: &FreezeMask,
    context: &[u32],
) -> Result<(f64, Gradients<f32>)> {
    let mut g = Graph::new();
    let b = store.bind(&mut g, mask)?;
    // Debug builds flag non-finite intermediates eagerly; either way it is a divergence.
    let loss = match sequence_loss(&mut g, &b, config, context) {
        Err(Error::NonFinite { .. }) => return Ok((f64::NAN, Gradients::new())),
        other => other?,
    };
    let value = f64::from(g.value(loss).item());
    if !value.is_finite() {
        return Ok((value, Gradients::new()));
    }
    Ok((value, g.backward(loss)?))
}

fn batch_gradients(
    store: &ParamStore<f32>,
    config: &ModelConfig,
    mask: &FreezeMask,
    batch: &[&[u32]],
) -> Result<Vec<(f64, Gradients<f32>)>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        batch
            .par_iter()
            .map(|c| context_gradients(store, config, mask, c))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        batch
            .iter()
            .map(|c| context_gradients(store, config, mask, c))
            .collect()
    }
}

/// Mean loss and summed-then-averaged gradients, combined in batch order so
/// the result does not depend on how the contexts were scheduled.
fn average(parts: Vec<(f64, Gradients<f32>)>) -> (f64, Gradients<f32>) {
    let n = parts.len();
    let mut loss = 0.0;
    let mut total = Gradients::new();
    for (l, grads) in parts {
        loss += l;
        for (name, g) in grads {
            match total.get_mut(&name) {
                None => {
                    total.insert(name, g);
                }
                Some(acc) => {
                    for (a, x) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *x;
                    }
                }
            }
        }
    }
    let inv = 1.0 / n as f32;
    for g in total.values_mut() {
        for x in g.data_mut() {
            *x *= inv;
        }
    }
    (loss / n as f64, total)
}

/// Runs the optimization loop in place: batches of random contexts from
/// `corpus`, Adam on the unfrozen parameters, exponential learning-rate
/// decay, and a validation perplexity at the end of every mini-epoch.
pub fn train_loop(
    store: &mut ParamStore<f32>,
    config: &ModelConfig,
    mask: &FreezeMask,
    corpus: &[u32],
    validation: &[Vec<u32>],
    train: &TrainConfig,
) -> Result<TrainLog> {
    config.validate()?;
    train.validate()?;
    store.check_mask(mask)?;
    let mut sampler = ContextSampler::new(corpus, config.context_length, train.seed)?;
    let mut adam = Adam::default();
    let total = train.total_steps();
    let mut log = TrainLog::new(train.seed);
    let mut step = 0;
    for epoch in 0..train.mini_epochs {
        let mut remaining = train.contexts_per_mini_epoch;
        while remaining > 0 {
            let take = remaining.min(train.batch_size);
            remaining -= take;
            let batch: Vec<&[u32]> = (&mut sampler).take(take).collect();
            let (loss, mut grads) = average(batch_gradients(store, config, mask, &batch)?);
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            clip_global_norm(&mut grads, train.grad_clip);
            let lr = lr_schedule(
                step,
                total.saturating_sub(1).max(1),
                train.lr_max,
                train.lr_min,
            )?;
            adam.step(store, &grads, lr)?;
            log.steps.push(StepRecord { step, lr, loss });
            step += 1;
        }
        if !validation.is_empty() {
            let model = PerspectiveModel::from_store(config, store)?;
            log.epochs.push(EpochRecord {
                mini_epoch: epoch,
                step,
                validation_ppl: perplexity_contexts(&model, validation)?,
            });
        }
    }
    Ok(log)
}

/// Trains a single-perspective model from scratch with every parameter
/// unfrozen. Fails with [`Error::TargetMissed`] when the final validation
/// perplexity is above `0.8 * vocab`.
pub fn pretrain_base(
    config: &ModelConfig,
    corpus: &[u32],
    validation: &[Vec<u32>],
    train: &TrainConfig,
) -> Result<(ParamStore<f32>, TrainLog)> {
    let config = config.base();
    let mut store = init_base(&config, train.seed)?;
    let mask = store.mask_where(|_| true);
    let log = train_loop(&mut store, &config, &mask, corpus, validation, train)?;
    if let Some(last) = log.epochs.last() {
        let target = 0.8 * config.vocab as f64;
        if last.validation_ppl > target {
            return Err(Error::TargetMissed {
                ppl: last.validation_ppl,
                target,
            });
        }
    }
    Ok((store, log))
}

/// Mask for fine-tuning: token-shift coefficients and aggregator trainable,
/// everything shared frozen.
pub fn finetune_mask(store: &ParamStore<f32>) -> FreezeMask {
    store.mask_where(|name| names::is_temporal(name) || names::is_aggregator(name))
}

/// Builds the perspective model from a pre-trained base, injects the
/// configured noise once, and trains only the perspective parameters. The
/// shared weights come back bit-for-bit unchanged.
pub fn finetune_perspectives(
    base: &ParamStore<f32>,
    config: &ModelConfig,
    corpus: &[u32],
    validation: &[Vec<u32>],
    train: &TrainConfig,
) -> Result<(ParamStore<f32>, TrainLog)> {
    let mut store = expand_store(base, config)?;
    inject_noise(
        &mut store,
        config,
        train.noise_target,
        train.noise_std,
        train.noise_mean,
        train.seed,
    )?;
    let mask = finetune_mask(&store);
    let before = shared_snapshot(&store);
    let log = train_loop(&mut store, config, &mask, corpus, validation, train)?;
    if shared_snapshot(&store) != before {
        return Err(Error::Inconsistent(
            "a frozen weight changed during fine-tuning".into(),
        ));
    }
    Ok((store, log))
}

/// Bit patterns of every shared (non-perspective) weight.
pub fn shared_snapshot(store: &ParamStore<f32>) -> Vec<(String, Vec<u32>)> {
    store
        .iter()
        .filter(|(name, _)| names::is_base(name))
        .map(|(name, t)| {
            (
                name.to_string(),
                t.data().iter().map(|x| x.to_bits()).collect(),
            )
        })
        .collect()
}
