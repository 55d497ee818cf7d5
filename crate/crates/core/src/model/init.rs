//! Fresh parameters for from-scratch tiny base models, and expansion of a base
//! store into a multi-perspective one.

use rand::Rng;

use crate::autograd::{Real, Tensor};
use crate::error::Result;
use crate::params::{names, ParamStore};
use crate::rng::{rng, Stream};

use super::aggregation::TransformerHeadParams;
use super::{Aggregation, ModelConfig};

fn uniform<F: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::lit(rng.random_range(-bound..bound)))
}

/// Projection init: uniform with variance `gain^2 / fan_in`.
fn projection<F: Real>(rng: &mut impl Rng, out: usize, fan_in: usize, gain: f64) -> Tensor<F> {
    uniform(rng, &[out, fan_in], gain * (3.0 / fan_in as f64).sqrt())
}

fn insert_ln<F: Real>(store: &mut ParamStore<F>, prefix: &str, d: usize) {
    let (w, b) = names::ln(prefix);
    store.insert(w, Tensor::full(&[d], F::one()));
    store.insert(b, Tensor::zeros(&[d]));
}

/// A single-perspective RWKV-v4 parameter set.
///
/// Token-shift coefficients grow with channel index and shrink with depth;
/// decay rates span `exp(-5)..exp(3)` across channels, steeper in deeper
/// layers; the bonus is `ln 0.3` plus a small channel zigzag.
pub fn init_base<F: Real>(config: &ModelConfig, seed: u64) -> Result<ParamStore<F>> {
    config.validate()?;
    let (layers, d, vocab) = (config.layers, config.d_model, config.vocab);
    let mut rng = rng(seed, Stream::Init);
    let mut store = ParamStore::new();

    store.insert(names::EMBEDDING, uniform(&mut rng, &[vocab, d], 0.1));
    insert_ln(&mut store, "ln0", d);
    let depth_gain = 1.0 / (2.0 * layers as f64).sqrt();
    for l in 0..layers {
        let b = |rest: &str| names::block(l, rest);
        let ratio_0_to_1 = if layers > 1 {
            l as f64 / (layers - 1) as f64
        } else {
            0.0
        };
        let ratio_1_to_0 = 1.0 - l as f64 / layers as f64;
        let ramp = |i: usize| i as f64 / d as f64;
        let coeff = |f: &dyn Fn(f64) -> f64| Tensor::<F>::from_fn(&[d], |i| F::lit(f(ramp(i))));

        insert_ln(&mut store, &b("ln1"), d);
        insert_ln(&mut store, &b("ln2"), d);

        let mixes = [
            coeff(&|x| x.powf(0.5 * ratio_1_to_0)),
            coeff(&|x| x.powf(ratio_1_to_0)),
            coeff(&|x| x.powf(ratio_1_to_0) + 0.3 * ratio_0_to_1),
            coeff(&|x| x.powf(ratio_1_to_0)),
            coeff(&|x| x.powf(ratio_1_to_0)),
        ];
        for (slot, mix) in names::TEMPORAL_SLOTS.iter().zip(mixes) {
            store.insert(names::temporal(l, slot, 0), mix);
        }

        let decay = Tensor::from_fn(&[d], |h| {
            let x = h as f64 / (d - 1) as f64;
            F::lit(-5.0 + 8.0 * x.powf(0.7 + 1.3 * ratio_0_to_1))
        });
        let bonus = Tensor::from_fn(&[d], |h| {
            F::lit(0.3f64.ln() + ((h + 1) % 3) as f64 * 0.5 - 0.5)
        });
        store.insert(b("att.time_decay"), decay);
        store.insert(b("att.time_first"), bonus);

        store.insert(b("att.receptance.weight"), projection(&mut rng, d, d, 1.0));
        store.insert(b("att.key.weight"), projection(&mut rng, d, d, 1.0));
        store.insert(b("att.value.weight"), projection(&mut rng, d, d, 1.0));
        store.insert(
            b("att.output.weight"),
            projection(&mut rng, d, d, depth_gain),
        );
        store.insert(b("ffn.receptance.weight"), projection(&mut rng, d, d, 1.0));
        store.insert(b("ffn.key.weight"), projection(&mut rng, 4 * d, d, 1.0));
        store.insert(
            b("ffn.value.weight"),
            projection(&mut rng, d, 4 * d, depth_gain),
        );
    }
    insert_ln(&mut store, "ln_out", d);
    if !config.tie_embeddings {
        store.insert(names::HEAD, projection(&mut rng, vocab, d, 1.0));
    }
    Ok(store)
}

/// Copies perspective 0's coefficients to perspectives `1..n` and adds the
/// aggregator parameters for `config.aggregation`. A selector starts at zero
/// (uniform weights) and a merge projection at exact averaging, so the
/// expanded model initially computes the same function as the base.
///
/// A single perspective gets no aggregator parameters at all.
pub fn expand_store<F: Real>(base: &ParamStore<F>, config: &ModelConfig) -> Result<ParamStore<F>> {
    config.validate()?;
    let (n, d) = (config.perspectives, config.d_model);
    let mut store = ParamStore::new();
    for (name, t) in base.iter() {
        if names::is_base(name) {
            store.insert(name, t.clone());
        }
    }
    for l in 0..config.layers {
        for slot in names::TEMPORAL_SLOTS {
            let source = base.get(&names::temporal(l, slot, 0))?;
            for i in 0..n {
                store.insert(names::temporal(l, slot, i), source.clone());
            }
        }
    }
    if n > 1 {
        match config.aggregation {
            Aggregation::Average => {}
            Aggregation::Transformer => {
                let merge = TransformerHeadParams::<F>::averaging(n, d);
                store.insert(names::MERGE_WEIGHT, merge.weight);
                store.insert(names::MERGE_BIAS, Tensor::vector(merge.bias));
            }
            Aggregation::Weighted => {
                store.insert(names::SELECTOR_WEIGHT, Tensor::zeros(&[n, d]));
                store.insert(names::SELECTOR_BIAS, Tensor::zeros(&[n]));
            }
        }
    }
    Ok(store)
}

/// Fresh multi-perspective parameters: a base init expanded to `config`.
pub fn init_model<F: Real>(config: &ModelConfig, seed: u64) -> Result<ParamStore<F>> {
    expand_store(&init_base(&config.base(), seed)?, config)
}

/// Parameter point for finite-difference checks: a fresh model whose decay
/// rates are redrawn from `exp(U[-1, 1])` and whose coefficients and aggregator
/// entries carry `U[-0.1, 0.1]` noise, so perspectives differ and no gradient
/// is pushed below the difference quotient's roundoff.
pub fn gradcheck_store(config: &ModelConfig, seed: u64) -> Result<ParamStore<f64>> {
    let mut store = init_model::<f64>(config, seed)?;
    let mut rng = rng(seed, Stream::Probe);
    for (name, t) in store.iter_mut() {
        if name.ends_with("att.time_decay") {
            for x in t.data_mut() {
                *x = rng.random_range(-1.0..1.0);
            }
        } else if !names::is_base(name) {
            for x in t.data_mut() {
                *x += rng.random_range(-0.1..0.1);
            }
        }
    }
    Ok(store)
}

/// Context for finite-difference checks: `context_length + 1` seeded tokens,
/// so the loss scores `context_length` predictions.
pub fn gradcheck_context(config: &ModelConfig, seed: u64) -> Vec<u32> {
    let mut rng = rng(seed, Stream::Probe);
    (0..=config.context_length)
        .map(|_| rng.random_range(0..config.vocab as u32))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let c = ModelConfig::tiny();
        let a: ParamStore<f32> = init_base(&c, 3).unwrap();
        assert_eq!(a, init_base(&c, 3).unwrap());
        assert_ne!(a, init_base(&c, 4).unwrap());
    }

    #[test]
    fn coefficients_lie_in_unit_interval_or_close() {
        let c = ModelConfig::default();
        let store: ParamStore<f64> = init_base(&c, 0).unwrap();
        for (name, t) in store.iter().filter(|(n, _)| names::is_temporal(n)) {
            assert!(t.data().iter().all(|x| (0.0..=1.3).contains(x)), "{name}");
        }
    }

    #[test]
    fn expansion_copies_and_adds_aggregator() {
        let c = ModelConfig::tiny();
        let store: ParamStore<f32> = init_model(&c, 1).unwrap();
        let a = store.get(&names::temporal(1, "att.time_mix_k", 0)).unwrap();
        let b = store.get(&names::temporal(1, "att.time_mix_k", 2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(store.get(names::SELECTOR_WEIGHT).unwrap().shape(), [3, 8]);
        let single: ParamStore<f32> = init_model(&c.base(), 1).unwrap();
        assert!(!single.contains(names::SELECTOR_WEIGHT));
    }
}
