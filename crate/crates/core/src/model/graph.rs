//! The multi-perspective forward pass as a differentiable graph over a whole
//! context. Op order matches the recurrent path in `baseline`/`perspectives`
//! exactly, so values agree bit-for-bit with token-by-token inference.

use crate::autograd::{Graph, NodeId, Real, Tensor};
use crate::error::{Error, Result};
use crate::kernels::WkvState;
use crate::params::{names, Bindings};

use super::aggregation::TransformerHeadParams;
use super::{Aggregation, ModelConfig};

/// Graph nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct SequenceNodes {
    /// Pre-head embeddings per perspective, each `[T, d]`.
    pub perspectives: Vec<NodeId>,
    /// Logits `[T, V]`.
    pub logits: NodeId,
    /// Selector weights `[T, n]` for the weighted aggregator.
    pub weights: Option<NodeId>,
}

fn ln<F: Real>(g: &mut Graph<F>, b: &Bindings, prefix: &str, x: NodeId) -> Result<NodeId> {
    let (w, bias) = names::ln(prefix);
    g.layer_norm(x, b.get(&w)?, b.get(&bias)?)
}

fn shift<F: Real>(
    g: &mut Graph<F>,
    b: &Bindings,
    x: NodeId,
    layer: usize,
    slot: &str,
    i: usize,
    d: usize,
) -> Result<NodeId> {
    let mu = b.get(&names::temporal(layer, slot, i))?;
    g.token_shift(x, mu, &vec![F::zero(); d])
}

/// One perspective's stream through every block, from an empty state.
fn stream<F: Real>(
    g: &mut Graph<F>,
    b: &Bindings,
    config: &ModelConfig,
    input: NodeId,
    i: usize,
) -> Result<NodeId> {
    let d = config.d_model;
    let mut x = input;
    for l in 0..config.layers {
        let w = |rest: &str| b.get(&names::block(l, rest));

        let xa = ln(g, b, &names::block(l, "ln1"), x)?;
        let xr = shift(g, b, xa, l, "att.time_mix_r", i, d)?;
        let xk = shift(g, b, xa, l, "att.time_mix_k", i, d)?;
        let xv = shift(g, b, xa, l, "att.time_mix_v", i, d)?;
        let r = g.linear(xr, w("att.receptance.weight")?)?;
        let k = g.linear(xk, w("att.key.weight")?)?;
        let v = g.linear(xv, w("att.value.weight")?)?;
        let decay = g.exp(w("att.time_decay")?)?;
        let wkv = g.wkv(k, v, decay, w("att.time_first")?, &WkvState::empty(d))?;
        let gate = g.sigmoid(r)?;
        let gated = g.mul(gate, wkv)?;
        let att = g.linear(gated, w("att.output.weight")?)?;
        x = g.add(x, att)?;

        let xf = ln(g, b, &names::block(l, "ln2"), x)?;
        let xr = shift(g, b, xf, l, "ffn.time_mix_r", i, d)?;
        let xk = shift(g, b, xf, l, "ffn.time_mix_k", i, d)?;
        let r = g.linear(xr, w("ffn.receptance.weight")?)?;
        let hidden = g.linear(xk, w("ffn.key.weight")?)?;
        let hidden = g.relu(hidden)?;
        let hidden = g.square(hidden)?;
        let value = g.linear(hidden, w("ffn.value.weight")?)?;
        let gate = g.sigmoid(r)?;
        let ffn = g.mul(gate, value)?;
        x = g.add(x, ffn)?;
    }
    Ok(x)
}

fn head<F: Real>(
    g: &mut Graph<F>,
    b: &Bindings,
    config: &ModelConfig,
    p: NodeId,
) -> Result<NodeId> {
    let normed = ln(g, b, "ln_out", p)?;
    let unembed = if config.tie_embeddings {
        b.get(names::EMBEDDING)?
    } else {
        b.get(names::HEAD)?
    };
    g.linear(normed, unembed)
}

/// Bound parameter, or a constant default when a single perspective has none.
fn param_or<F: Real>(
    g: &mut Graph<F>,
    b: &Bindings,
    name: &str,
    n: usize,
    default: impl FnOnce() -> Tensor<F>,
) -> Result<NodeId> {
    match b.try_get(name) {
        Some(id) => Ok(id),
        None if n == 1 => Ok(g.constant(default())),
        None => Err(Error::UnknownParam(name.to_string())),
    }
}

/// Builds logits for `tokens` (from an empty state) on `g`.
pub fn sequence_forward<F: Real>(
    g: &mut Graph<F>,
    b: &Bindings,
    config: &ModelConfig,
    tokens: &[u32],
) -> Result<SequenceNodes> {
    config.validate()?;
    if tokens.is_empty() {
        return Err(Error::EmptyInput("token sequence"));
    }
    let (n, d) = (config.perspectives, config.d_model);
    let emb = g.embed(b.get(names::EMBEDDING)?, tokens)?;
    let input = ln(g, b, "ln0", emb)?;
    let ps = (0..n)
        .map(|i| stream(g, b, config, input, i))
        .collect::<Result<Vec<_>>>()?;

    let (logits, weights) = match config.aggregation {
        Aggregation::Average => {
            let mean = g.mean_of(&ps)?;
            (head(g, b, config, mean)?, None)
        }
        Aggregation::Transformer => {
            let merge = TransformerHeadParams::<F>::averaging(n, d);
            let w = param_or(g, b, names::MERGE_WEIGHT, n, || merge.weight.clone())?;
            let bias = param_or(g, b, names::MERGE_BIAS, n, || {
                Tensor::vector(merge.bias.clone())
            })?;
            let concat = g.concat(&ps)?;
            let merged = g.linear(concat, w)?;
            let merged = g.add_row(merged, bias)?;
            (head(g, b, config, merged)?, None)
        }
        Aggregation::Weighted => {
            let w = param_or(g, b, names::SELECTOR_WEIGHT, n, || Tensor::zeros(&[n, d]))?;
            let bias = param_or(g, b, names::SELECTOR_BIAS, n, || Tensor::zeros(&[n]))?;
            let mean = g.mean_of(&ps)?;
            let scores = g.linear(mean, w)?;
            let scores = g.add_row(scores, bias)?;
            let weights = g.softmax(scores)?;
            let heads = ps
                .iter()
                .map(|p| head(g, b, config, *p))
                .collect::<Result<Vec<_>>>()?;
            (g.weighted_sum(weights, &heads)?, Some(weights))
        }
    };
    Ok(SequenceNodes {
        perspectives: ps,
        logits,
        weights,
    })
}

/// Mean next-token cross-entropy over a context: positions `0..T-1` predict
/// tokens `1..T`.
pub fn sequence_loss<F: Real>(
    g: &mut Graph<F>,
    b: &Bindings,
    config: &ModelConfig,
    context: &[u32],
) -> Result<NodeId> {
    if context.len() < 2 {
        return Err(Error::EmptyInput("context needs at least two tokens"));
    }
    let nodes = sequence_forward(g, b, config, &context[..context.len() - 1])?;
    g.cross_entropy(nodes.logits, &context[1..])
}

/// Central-difference check (step `1e-5`) of every parameter gradient of
/// [`sequence_loss`] on `context`.
pub fn graph_finite_diff(
    config: &ModelConfig,
    store: &crate::params::ParamStore<f64>,
    context: &[u32],
) -> Result<crate::autograd::FiniteDiffReport> {
    let mask = store.mask_where(|_| true);
    crate::autograd::finite_diff_check(
        |g, b| sequence_loss(g, b, config, context),
        store,
        &mask,
        1e-5,
    )
}
