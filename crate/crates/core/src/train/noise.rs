use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Real;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PerspectiveParams, SelectorParams};
use crate::params::{names, ParamStore};
use crate::rng::{rng, Stream};

/// Where the one-off initialization noise goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTarget {
    /// The aggregator's linear layer.
    Selector,
    /// Every token-shift coefficient of every perspective.
    Temporal,
}

impl NoiseTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseTarget::Selector => "selector",
            NoiseTarget::Temporal => "temporal",
        }
    }
}

impl std::fmt::Display for NoiseTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for NoiseTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "selector" => Ok(NoiseTarget::Selector),
            "temporal" => Ok(NoiseTarget::Temporal),
            other => Err(Error::config(
                "noise_target",
                format!("unknown target `{other}`"),
            )),
        }
    }
}

struct Gaussian {
    dist: Normal<f64>,
    rng: ChaCha8Rng,
}

impl Gaussian {
    /// `None` when the draw would be the identity (zero mean and spread).
    fn new(std: f64, mean: f64, seed: u64, stream: Stream) -> Result<Option<Self>> {
        if !(std >= 0.0) || !std.is_finite() {
            return Err(Error::config(
                "noise_std",
                "must be finite and non-negative",
            ));
        }
        if !mean.is_finite() {
            return Err(Error::config("noise_mean", "must be finite"));
        }
        if std == 0.0 && mean == 0.0 {
            return Ok(None);
        }
        let dist = Normal::new(mean, std).map_err(|e| Error::config("noise_std", e.to_string()))?;
        Ok(Some(Self {
            dist,
            rng: rng(seed, stream),
        }))
    }

    fn perturb<F: Real>(&mut self, values: &mut [F]) {
        for x in values {
            *x = *x + F::lit(self.dist.sample(&mut self.rng));
        }
    }
}

/// Adds i.i.d. `N(mean, std^2)` draws to every entry of `W` (row-major), then `b`.
pub fn inject_selector_noise<F: Real>(
    selector: &mut SelectorParams<F>,
    std: f64,
    mean: f64,
    seed: u64,
) -> Result<()> {
    if let Some(mut g) = Gaussian::new(std, mean, seed, Stream::SelectorNoise)? {
        g.perturb(selector.weight.data_mut());
        g.perturb(&mut selector.bias);
    }
    Ok(())
}

/// Adds i.i.d. `N(mean, std^2)` draws to every coefficient, perspective by
/// perspective, layer by layer, in slot order.
pub fn inject_temporal_noise<F: Real>(
    params: &mut PerspectiveParams<F>,
    std: f64,
    mean: f64,
    seed: u64,
) -> Result<()> {
    if let Some(mut g) = Gaussian::new(std, mean, seed, Stream::TemporalNoise)? {
        for i in 0..params.len() {
            for layer in params.perspective_mut(i) {
                for slot in layer.slots_mut() {
                    g.perturb(slot);
                }
            }
        }
    }
    Ok(())
}

/// Store-level noise in the same draw order as [`inject_selector_noise`] and
/// [`inject_temporal_noise`]. With the selector target, a transformer-like
/// merge layer receives the noise instead; averaging has nothing to perturb.
pub fn inject_noise<F: Real>(
    store: &mut ParamStore<F>,
    config: &ModelConfig,
    target: NoiseTarget,
    std: f64,
    mean: f64,
    seed: u64,
) -> Result<()> {
    match target {
        NoiseTarget::Selector => {
            let Some(mut g) = Gaussian::new(std, mean, seed, Stream::SelectorNoise)? else {
                return Ok(());
            };
            for (w, b) in [
                (names::SELECTOR_WEIGHT, names::SELECTOR_BIAS),
                (names::MERGE_WEIGHT, names::MERGE_BIAS),
            ] {
                if store.contains(w) {
                    g.perturb(store.get_mut(w)?.data_mut());
                    g.perturb(store.get_mut(b)?.data_mut());
                    break;
                }
            }
        }
        NoiseTarget::Temporal => {
            let Some(mut g) = Gaussian::new(std, mean, seed, Stream::TemporalNoise)? else {
                return Ok(());
            };
            for i in 0..config.perspectives {
                for l in 0..config.layers {
                    for slot in names::TEMPORAL_SLOTS {
                        g.perturb(store.get_mut(&names::temporal(l, slot, i))?.data_mut());
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;
    use crate::model::{init_model, init_perspectives};

    #[test]
    fn zero_std_is_identity() {
        let mut sel = SelectorParams::<f32>::zeros(4, 16);
        inject_selector_noise(&mut sel, 0.0, 0.0, 1).unwrap();
        assert_eq!(sel, SelectorParams::zeros(4, 16));
        assert!(inject_selector_noise(&mut sel, -1.0, 0.0, 1).is_err());
    }

    #[test]
    fn same_seed_same_noise() {
        let mut a = SelectorParams::<f32>::zeros(4, 16);
        let mut b = SelectorParams::<f32>::zeros(4, 16);
        inject_selector_noise(&mut a, 0.01, 0.0, 42).unwrap();
        inject_selector_noise(&mut b, 0.01, 0.0, 42).unwrap();
        assert_eq!(a, b);
        inject_selector_noise(&mut b, 0.01, 0.0, 43).unwrap();
        assert_ne!(a, b);
    }

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var.sqrt())
    }

    #[test]
    fn selector_noise_statistics() {
        let mut sel = SelectorParams::<f64> {
            weight: Tensor::zeros(&[100, 99]),
            bias: vec![0.0; 100],
        };
        inject_selector_noise(&mut sel, 0.01, 0.0, 7).unwrap();
        let all: Vec<f64> = sel.weight.data().iter().chain(&sel.bias).copied().collect();
        assert_eq!(all.len(), 10_000);
        let (mean, std) = moments(&all);
        assert!(mean.abs() <= 0.001, "{mean}");
        assert!((0.009..=0.011).contains(&std), "{std}");
    }

    #[test]
    fn temporal_noise_breaks_symmetry_with_the_right_statistics() {
        let config = ModelConfig {
            layers: 5,
            d_model: 100,
            perspectives: 4,
            ..ModelConfig::tiny()
        };
        let store: crate::params::ParamStore<f64> = init_model(&config.base(), 0).unwrap();
        let base = PerspectiveParams::load(&config.base(), &store).unwrap();
        let clean = init_perspectives(base.perspective(0), 4).unwrap();
        let mut noisy = clean.clone();
        inject_temporal_noise(&mut noisy, 0.0, 0.0, 3).unwrap();
        assert_eq!(noisy, clean);
        inject_temporal_noise(&mut noisy, 0.01, 0.0, 3).unwrap();
        assert_ne!(noisy.perspective(0), noisy.perspective(1));
        let mut diffs = Vec::new();
        for i in 0..4 {
            for (a, b) in noisy.perspective(i).iter().zip(clean.perspective(i)) {
                for (sa, sb) in a.slots().iter().zip(b.slots()) {
                    diffs.extend(sa.iter().zip(sb.iter()).map(|(x, y)| x - y));
                }
            }
        }
        assert_eq!(diffs.len(), 10_000);
        let (mean, std) = moments(&diffs);
        assert!(mean.abs() <= 0.001, "{mean}");
        assert!((0.009..=0.011).contains(&std), "{std}");
    }

    #[test]
    fn store_level_matches_struct_level() {
        let config = ModelConfig::tiny();
        let mut store: crate::params::ParamStore<f32> = init_model(&config, 0).unwrap();
        let mut sel = SelectorParams::<f32>::zeros(3, 8);
        inject_noise(&mut store, &config, NoiseTarget::Selector, 0.01, 0.0, 5).unwrap();
        inject_selector_noise(&mut sel, 0.01, 0.0, 5).unwrap();
        assert_eq!(store.get(names::SELECTOR_WEIGHT).unwrap(), &sel.weight);

        let mut params = PerspectiveParams::load(&config, &store).unwrap();
        inject_noise(&mut store, &config, NoiseTarget::Temporal, 0.01, 0.0, 5).unwrap();
        inject_temporal_noise(&mut params, 0.01, 0.0, 5).unwrap();
        assert_eq!(PerspectiveParams::load(&config, &store).unwrap(), params);
    }
}
