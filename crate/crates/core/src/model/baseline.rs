//! The plain RWKV-v4 block stack evaluated one token at a time.

use crate::autograd::{Real, Tensor};
use crate::error::{Error, Result};
use crate::kernels::{self, WkvState};
use crate::params::{names, ParamStore};

use super::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<F> {
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Real> LayerNorm<F> {
    pub fn apply(&self, x: &[F]) -> Vec<F> {
        let mut out = vec![F::zero(); x.len()];
        kernels::layer_norm(x, &self.weight, &self.bias, &mut out);
        out
    }

    fn load(store: &ParamStore<F>, prefix: &str) -> Result<Self> {
        let (w, b) = names::ln(prefix);
        Ok(Self {
            weight: store.get(&w)?.data().to_vec(),
            bias: store.get(&b)?.data().to_vec(),
        })
    }
}

/// Token-shift coefficients of a time-mixing block.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeMixCoeffs<F> {
    pub mix_r: Vec<F>,
    pub mix_k: Vec<F>,
    pub mix_v: Vec<F>,
}

/// Token-shift coefficients of a channel-mixing block.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMixCoeffs<F> {
    pub mix_r: Vec<F>,
    pub mix_k: Vec<F>,
}

/// All temporal coefficients of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCoeffs<F> {
    pub time: TimeMixCoeffs<F>,
    pub channel: ChannelMixCoeffs<F>,
}

impl<F: Real> LayerCoeffs<F> {
    pub(crate) fn load(store: &ParamStore<F>, layer: usize, perspective: usize) -> Result<Self> {
        let get = |slot: &str| -> Result<Vec<F>> {
            Ok(store
                .get(&names::temporal(layer, slot, perspective))?
                .data()
                .to_vec())
        };
        Ok(Self {
            time: TimeMixCoeffs {
                mix_r: get("att.time_mix_r")?,
                mix_k: get("att.time_mix_k")?,
                mix_v: get("att.time_mix_v")?,
            },
            channel: ChannelMixCoeffs {
                mix_r: get("ffn.time_mix_r")?,
                mix_k: get("ffn.time_mix_k")?,
            },
        })
    }

    /// Coefficient vectors in [`names::TEMPORAL_SLOTS`] order.
    pub fn slots(&self) -> [&Vec<F>; 5] {
        [
            &self.time.mix_r,
            &self.time.mix_k,
            &self.time.mix_v,
            &self.channel.mix_r,
            &self.channel.mix_k,
        ]
    }

    pub fn slots_mut(&mut self) -> [&mut Vec<F>; 5] {
        [
            &mut self.time.mix_r,
            &mut self.time.mix_k,
            &mut self.time.mix_v,
            &mut self.channel.mix_r,
            &mut self.channel.mix_k,
        ]
    }
}

/// Projections, decay and bonus of a time-mixing block.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeMixWeights<F> {
    pub receptance: Tensor<F>,
    pub key: Tensor<F>,
    pub value: Tensor<F>,
    pub output: Tensor<F>,
    /// Per-channel decay rate `w = exp(time_decay)`.
    pub decay: Vec<F>,
    /// Per-channel first-token bonus `u`.
    pub bonus: Vec<F>,
}

/// Projections of a channel-mixing block; `key` expands to `4 d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMixWeights<F> {
    pub receptance: Tensor<F>,
    pub key: Tensor<F>,
    pub value: Tensor<F>,
}

/// A time-mixing block with its own coefficients.
#[derive(Debug, Clone, Copy)]
pub struct TimeMixParams<'a, F> {
    pub weights: &'a TimeMixWeights<F>,
    pub coeffs: &'a TimeMixCoeffs<F>,
}

/// A channel-mixing block with its own coefficients.
#[derive(Debug, Clone, Copy)]
pub struct ChannelMixParams<'a, F> {
    pub weights: &'a ChannelMixWeights<F>,
    pub coeffs: &'a ChannelMixCoeffs<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<F> {
    pub ln1: LayerNorm<F>,
    pub ln2: LayerNorm<F>,
    pub time: TimeMixWeights<F>,
    pub channel: ChannelMixWeights<F>,
}

/// Final layer norm plus unembedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<F> {
    pub ln_out: LayerNorm<F>,
    pub unembed: Tensor<F>,
}

impl<F: Real> Head<F> {
    pub fn apply(&self, p: &[F]) -> Result<Vec<F>> {
        self.unembed.matvec(&self.ln_out.apply(p))
    }
}

/// Everything a perspective does not own.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedWeights<F> {
    pub embedding: Tensor<F>,
    pub ln0: LayerNorm<F>,
    pub blocks: Vec<BlockWeights<F>>,
    pub head: Head<F>,
}

impl<F: Real> SharedWeights<F> {
    pub fn from_store(config: &ModelConfig, store: &ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let mat = |name: String| -> Result<Tensor<F>> { Ok(store.get(&name)?.clone()) };
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let b = |rest: &str| names::block(l, rest);
            let decay = store
                .get(&b("att.time_decay"))?
                .data()
                .iter()
                .map(|x| x.exp())
                .collect();
            blocks.push(BlockWeights {
                ln1: LayerNorm::load(store, &b("ln1"))?,
                ln2: LayerNorm::load(store, &b("ln2"))?,
                time: TimeMixWeights {
                    receptance: mat(b("att.receptance.weight"))?,
                    key: mat(b("att.key.weight"))?,
                    value: mat(b("att.value.weight"))?,
                    output: mat(b("att.output.weight"))?,
                    decay,
                    bonus: store.get(&b("att.time_first"))?.data().to_vec(),
                },
                channel: ChannelMixWeights {
                    receptance: mat(b("ffn.receptance.weight"))?,
                    key: mat(b("ffn.key.weight"))?,
                    value: mat(b("ffn.value.weight"))?,
                },
            });
        }
        let embedding = mat(names::EMBEDDING.to_string())?;
        let unembed = if config.tie_embeddings {
            embedding.clone()
        } else {
            mat(names::HEAD.to_string())?
        };
        if embedding.shape() != [config.vocab, config.d_model] {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                left: embedding.shape().to_vec(),
                right: vec![config.vocab, config.d_model],
            });
        }
        Ok(Self {
            embedding,
            ln0: LayerNorm::load(store, "ln0")?,
            blocks,
            head: Head {
                ln_out: LayerNorm::load(store, "ln_out")?,
                unembed,
            },
        })
    }

    pub fn d_model(&self) -> usize {
        self.embedding.cols()
    }

    pub fn vocab(&self) -> usize {
        self.embedding.rows()
    }

    /// Normalized input embedding of one token; identical for every perspective.
    pub fn input(&self, token: u32) -> Result<Vec<F>> {
        let vocab = self.vocab();
        if token as usize >= vocab {
            return Err(Error::TokenOutOfRange { token, vocab });
        }
        Ok(self.ln0.apply(self.embedding.row(token as usize)))
    }
}

/// Recurrent state of one time-mixing block.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeMixState<F> {
    pub prev: Vec<F>,
    pub wkv: WkvState<F>,
}

/// Recurrent state of one layer of one perspective.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState<F> {
    pub time: TimeMixState<F>,
    pub channel_prev: Vec<F>,
}

impl<F: Real> LayerState<F> {
    pub fn new(d: usize) -> Self {
        Self {
            time: TimeMixState {
                prev: vec![F::zero(); d],
                wkv: WkvState::empty(d),
            },
            channel_prev: vec![F::zero(); d],
        }
    }
}

fn check_len<F>(op: &'static str, a: &[F], b: &[F]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    Ok(())
}

/// `mu * x_t + (1 - mu) * x_prev`.
pub fn token_shift_mix<F: Real>(x_t: &[F], x_prev: &[F], mu: &[F]) -> Result<Vec<F>> {
    check_len("token_shift_mix", x_t, x_prev)?;
    check_len("token_shift_mix", x_t, mu)?;
    let mut out = vec![F::zero(); x_t.len()];
    kernels::token_shift(x_t, x_prev, mu, &mut out);
    Ok(out)
}

/// One WKV step with decay rate `w` and bonus `u`; returns the output and
/// advances `state`.
pub fn wkv_step<F: Real>(
    state: &mut WkvState<F>,
    k: &[F],
    v: &[F],
    w: &[F],
    u: &[F],
) -> Result<Vec<F>> {
    for other in [v, w, u] {
        check_len("wkv_step", k, other)?;
    }
    if state.dim() != k.len() {
        return Err(Error::ShapeMismatch {
            op: "wkv_step",
            left: vec![state.dim()],
            right: vec![k.len()],
        });
    }
    if !k.iter().chain(v).all(|x| x.is_finite()) {
        return Err(Error::NonFinite { op: "wkv_step" });
    }
    let mut out = vec![F::zero(); k.len()];
    kernels::wkv_step(state, k, v, w, u, &mut out);
    Ok(out)
}

/// Time-mixing block on one (normalized) token. Updates `state`.
pub fn time_mixing_forward<F: Real>(
    params: TimeMixParams<'_, F>,
    x: &[F],
    state: &mut TimeMixState<F>,
) -> Result<Vec<F>> {
    let TimeMixParams { weights, coeffs } = params;
    let xr = token_shift_mix(x, &state.prev, &coeffs.mix_r)?;
    let xk = token_shift_mix(x, &state.prev, &coeffs.mix_k)?;
    let xv = token_shift_mix(x, &state.prev, &coeffs.mix_v)?;
    let r = weights.receptance.matvec(&xr)?;
    let k = weights.key.matvec(&xk)?;
    let v = weights.value.matvec(&xv)?;
    let wkv = wkv_step(&mut state.wkv, &k, &v, &weights.decay, &weights.bonus)?;
    let gated: Vec<F> = r
        .iter()
        .zip(&wkv)
        .map(|(r, y)| kernels::sigmoid(*r) * *y)
        .collect();
    state.prev.copy_from_slice(x);
    weights.output.matvec(&gated)
}

/// Channel-mixing block on one (normalized) token. Updates `prev`.
pub fn channel_mixing_forward<F: Real>(
    params: ChannelMixParams<'_, F>,
    x: &[F],
    prev: &mut [F],
) -> Result<Vec<F>> {
    let ChannelMixParams { weights, coeffs } = params;
    let xr = token_shift_mix(x, prev, &coeffs.mix_r)?;
    let xk = token_shift_mix(x, prev, &coeffs.mix_k)?;
    let r = weights.receptance.matvec(&xr)?;
    let hidden: Vec<F> = weights
        .key
        .matvec(&xk)?
        .into_iter()
        .map(|h| {
            let h = h.max(F::zero());
            h * h
        })
        .collect();
    let value = weights.value.matvec(&hidden)?;
    prev.copy_from_slice(x);
    Ok(r.iter()
        .zip(&value)
        .map(|(r, v)| kernels::sigmoid(*r) * *v)
        .collect())
}

/// Runs one token through every block of one stream, returning the residual
/// stream after the last block (the pre-head embedding).
pub fn stream_step<F: Real>(
    shared: &SharedWeights<F>,
    coeffs: &[LayerCoeffs<F>],
    input: &[F],
    state: &mut [LayerState<F>],
) -> Result<Vec<F>> {
    let mut x = input.to_vec();
    for ((block, layer), st) in shared.blocks.iter().zip(coeffs).zip(state.iter_mut()) {
        let xa = block.ln1.apply(&x);
        let att = time_mixing_forward(
            TimeMixParams {
                weights: &block.time,
                coeffs: &layer.time,
            },
            &xa,
            &mut st.time,
        )?;
        for (xi, a) in x.iter_mut().zip(&att) {
            *xi = *xi + *a;
        }
        let xf = block.ln2.apply(&x);
        let ffn = channel_mixing_forward(
            ChannelMixParams {
                weights: &block.channel,
                coeffs: &layer.channel,
            },
            &xf,
            &mut st.channel_prev,
        )?;
        for (xi, f) in x.iter_mut().zip(&ffn) {
            *xi = *xi + *f;
        }
    }
    Ok(x)
}

/// Single-perspective RWKV-v4 language model.
#[derive(Debug, Clone, PartialEq)]
pub struct RwkvModel<F: Real = f32> {
    pub config: ModelConfig,
    pub shared: SharedWeights<F>,
    pub coeffs: Vec<LayerCoeffs<F>>,
}

impl<F: Real> RwkvModel<F> {
    /// Loads the shared weights and the coefficients of perspective 0.
    pub fn from_store(config: &ModelConfig, store: &ParamStore<F>) -> Result<Self> {
        let shared = SharedWeights::from_store(config, store)?;
        let coeffs = (0..config.layers)
            .map(|l| LayerCoeffs::load(store, l, 0))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.base(),
            shared,
            coeffs,
        })
    }

    pub fn new_state(&self) -> Vec<LayerState<F>> {
        vec![LayerState::new(self.shared.d_model()); self.config.layers]
    }

    /// Pre-head embedding after feeding `token`.
    pub fn embed_step(&self, token: u32, state: &mut [LayerState<F>]) -> Result<Vec<F>> {
        let input = self.shared.input(token)?;
        stream_step(&self.shared, &self.coeffs, &input, state)
    }

    pub fn step(&self, token: u32, state: &mut [LayerState<F>]) -> Result<Vec<F>> {
        let p = self.embed_step(token, state)?;
        self.shared.head.apply(&p)
    }

    /// Pre-head embeddings `[T, d]` from an empty state.
    pub fn embeddings(&self, tokens: &[u32]) -> Result<Tensor<F>> {
        let mut state = self.new_state();
        let mut out = Vec::with_capacity(tokens.len() * self.shared.d_model());
        for &t in tokens {
            out.extend(self.embed_step(t, &mut state)?);
        }
        Tensor::new(vec![tokens.len(), self.shared.d_model()], out)
    }

    /// Logits `[T, V]` from an empty state; row `t` predicts token `t + 1`.
    pub fn model_forward(&self, tokens: &[u32]) -> Result<Tensor<F>> {
        let mut state = self.new_state();
        self.forward_with_state(tokens, &mut state)
    }

    pub fn forward_with_state(
        &self,
        tokens: &[u32],
        state: &mut [LayerState<F>],
    ) -> Result<Tensor<F>> {
        let mut out = Vec::with_capacity(tokens.len() * self.shared.vocab());
        for &t in tokens {
            out.extend(self.step(t, state)?);
        }
        Tensor::new(vec![tokens.len(), self.shared.vocab()], out)
    }
}
