//! `n` parallel temporal views over one set of shared weights.
//!
//! Each perspective owns its token-shift coefficients and recurrent state and
//! runs the full block stack independently. Everything else (projections,
//! decay, bonus, layer norms, embedding, head) is shared by reference.

use crate::autograd::{Real, Tensor};
use crate::error::{Error, Result};
use crate::params::{names, ParamStore};

use super::aggregation::{Aggregator, SelectorParams, TransformerHeadParams};
use super::baseline::{stream_step, LayerCoeffs, LayerState, SharedWeights};
use super::{Aggregation, ModelConfig};

/// Token-shift coefficients of every perspective, indexed `[perspective][layer]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerspectiveParams<F> {
    coeffs: Vec<Vec<LayerCoeffs<F>>>,
}

impl<F: Real> PerspectiveParams<F> {
    pub fn load(config: &ModelConfig, store: &ParamStore<F>) -> Result<Self> {
        let coeffs = (0..config.perspectives)
            .map(|i| {
                (0..config.layers)
                    .map(|l| LayerCoeffs::load(store, l, i))
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok(Self { coeffs })
    }

    pub fn from_perspectives(coeffs: Vec<Vec<LayerCoeffs<F>>>) -> Result<Self> {
        let layers = coeffs
            .first()
            .ok_or(Error::config("perspectives", "must be at least 1"))?
            .len();
        if coeffs.iter().any(|c| c.len() != layers) {
            return Err(Error::Inconsistent(
                "perspectives disagree on layer count".into(),
            ));
        }
        Ok(Self { coeffs })
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn perspective(&self, i: usize) -> &[LayerCoeffs<F>] {
        &self.coeffs[i]
    }

    pub fn perspective_mut(&mut self, i: usize) -> &mut [LayerCoeffs<F>] {
        &mut self.coeffs[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[LayerCoeffs<F>]> {
        self.coeffs.iter().map(Vec::as_slice)
    }

    /// Writes every coefficient back under its perspective-suffixed name.
    pub fn store_into(&self, store: &mut ParamStore<F>) {
        for (i, layers) in self.coeffs.iter().enumerate() {
            for (l, layer) in layers.iter().enumerate() {
                for (slot, values) in names::TEMPORAL_SLOTS.iter().zip(layer.slots()) {
                    store.insert(names::temporal(l, slot, i), Tensor::vector(values.clone()));
                }
            }
        }
    }
}

/// `n` exact copies of the base coefficients.
pub fn init_perspectives<F: Real>(
    base: &[LayerCoeffs<F>],
    n: usize,
) -> Result<PerspectiveParams<F>> {
    if n < 1 {
        return Err(Error::config("perspectives", "must be at least 1"));
    }
    PerspectiveParams::from_perspectives(vec![base.to_vec(); n])
}

/// Recurrent state of every perspective, indexed `[perspective][layer]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerspectiveState<F> {
    streams: Vec<Vec<LayerState<F>>>,
}

impl<F: Real> PerspectiveState<F> {
    pub fn new(n: usize, layers: usize, d: usize) -> Self {
        Self {
            streams: vec![vec![LayerState::new(d); layers]; n],
        }
    }

    pub fn stream(&self, i: usize) -> &[LayerState<F>] {
        &self.streams[i]
    }

    /// Returns perspective `i` to the empty state.
    pub fn reset(&mut self, i: usize) {
        let d = self.streams[i][0].channel_prev.len();
        for layer in &mut self.streams[i] {
            *layer = LayerState::new(d);
        }
    }
}

/// Logits for one position plus the selector weights, when the aggregator has any.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<F> {
    pub logits: Vec<F>,
    pub weights: Option<Vec<F>>,
}

/// Multi-perspective language model.
#[derive(Debug, Clone, PartialEq)]
pub struct PerspectiveModel<F: Real = f32> {
    pub config: ModelConfig,
    pub shared: SharedWeights<F>,
    pub perspectives: PerspectiveParams<F>,
    pub aggregator: Aggregator<F>,
    /// Step the perspective streams on the rayon pool.
    pub parallel: bool,
}

/// Aggregator parameters from the store. A single perspective needs none; the
/// defaults (zero selector, identity merge) reduce exactly to the plain head.
pub(crate) fn load_aggregator<F: Real>(
    config: &ModelConfig,
    store: &ParamStore<F>,
) -> Result<Aggregator<F>> {
    let (n, d) = (config.perspectives, config.d_model);
    let get = |name: &str| -> Result<Option<Tensor<F>>> {
        match store.get(name) {
            Ok(t) => Ok(Some(t.clone())),
            Err(_) if n == 1 => Ok(None),
            Err(e) => Err(e),
        }
    };
    Ok(match config.aggregation {
        Aggregation::Average => Aggregator::Average,
        Aggregation::Transformer => match (get(names::MERGE_WEIGHT)?, get(names::MERGE_BIAS)?) {
            (Some(weight), Some(bias)) => Aggregator::Transformer(TransformerHeadParams {
                weight,
                bias: bias.into_data(),
            }),
            _ => Aggregator::Transformer(TransformerHeadParams::averaging(n, d)),
        },
        Aggregation::Weighted => match (get(names::SELECTOR_WEIGHT)?, get(names::SELECTOR_BIAS)?) {
            (Some(weight), Some(bias)) => Aggregator::Weighted(SelectorParams {
                weight,
                bias: bias.into_data(),
            }),
            _ => Aggregator::Weighted(SelectorParams::zeros(n, d)),
        },
    })
}

impl<F: Real> PerspectiveModel<F> {
    pub fn from_store(config: &ModelConfig, store: &ParamStore<F>) -> Result<Self> {
        let shared = SharedWeights::from_store(config, store)?;
        Ok(Self {
            config: config.clone(),
            shared,
            perspectives: PerspectiveParams::load(config, store)?,
            aggregator: load_aggregator(config, store)?,
            parallel: false,
        })
    }

    pub fn n(&self) -> usize {
        self.perspectives.len()
    }

    pub fn new_state(&self) -> PerspectiveState<F> {
        PerspectiveState::new(self.n(), self.config.layers, self.shared.d_model())
    }

    /// Pre-head embeddings `p_1..p_n` after feeding `token`.
    pub fn embed_step(&self, token: u32, state: &mut PerspectiveState<F>) -> Result<Vec<Vec<F>>> {
        let input = self.shared.input(token)?;
        if self.parallel {
            return self.embed_step_parallel(&input, state);
        }
        self.perspectives
            .coeffs
            .iter()
            .zip(state.streams.iter_mut())
            .map(|(coeffs, st)| stream_step(&self.shared, coeffs, &input, st))
            .collect()
    }

    #[cfg(feature = "parallel")]
    fn embed_step_parallel(
        &self,
        input: &[F],
        state: &mut PerspectiveState<F>,
    ) -> Result<Vec<Vec<F>>> {
        use rayon::prelude::*;
        self.perspectives
            .coeffs
            .par_iter()
            .zip(state.streams.par_iter_mut())
            .map(|(coeffs, st)| stream_step(&self.shared, coeffs, input, st))
            .collect()
    }

    #[cfg(not(feature = "parallel"))]
    fn embed_step_parallel(
        &self,
        input: &[F],
        state: &mut PerspectiveState<F>,
    ) -> Result<Vec<Vec<F>>> {
        self.perspectives
            .coeffs
            .iter()
            .zip(state.streams.iter_mut())
            .map(|(coeffs, st)| stream_step(&self.shared, coeffs, input, st))
            .collect()
    }

    pub fn aggregate(&self, ps: &[Vec<F>]) -> Result<StepOutput<F>> {
        let slices: Vec<&[F]> = ps.iter().map(Vec::as_slice).collect();
        let (logits, weights) = self.aggregator.apply(&slices, &self.shared.head)?;
        Ok(StepOutput { logits, weights })
    }

    pub fn step(&self, token: u32, state: &mut PerspectiveState<F>) -> Result<StepOutput<F>> {
        let ps = self.embed_step(token, state)?;
        self.aggregate(&ps)
    }

    /// Per-perspective pre-head embeddings, each `[T, d]`, from an empty state.
    pub fn multi_forward(&self, tokens: &[u32]) -> Result<Vec<Tensor<F>>> {
        let d = self.shared.d_model();
        let mut state = self.new_state();
        let mut out = vec![Vec::with_capacity(tokens.len() * d); self.n()];
        for &t in tokens {
            for (acc, p) in out.iter_mut().zip(self.embed_step(t, &mut state)?) {
                acc.extend(p);
            }
        }
        out.into_iter()
            .map(|data| Tensor::new(vec![tokens.len(), d], data))
            .collect()
    }

    /// Logits `[T, V]` from an empty state; row `t` predicts token `t + 1`.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor<F>> {
        let mut state = self.new_state();
        self.forward_with_state(tokens, &mut state)
    }

    pub fn forward_with_state(
        &self,
        tokens: &[u32],
        state: &mut PerspectiveState<F>,
    ) -> Result<Tensor<F>> {
        let mut out = Vec::with_capacity(tokens.len() * self.shared.vocab());
        for &t in tokens {
            out.extend(self.step(t, state)?.logits);
        }
        Tensor::new(vec![tokens.len(), self.shared.vocab()], out)
    }
}
