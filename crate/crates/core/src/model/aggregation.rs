//! Fusing perspective embeddings `p_1..p_n` into vocabulary logits.

use crate::autograd::{Real, Tensor};
use crate::error::{Error, Result};
use crate::kernels;

use super::baseline::Head;

/// Linear selector producing one score per perspective: `W: [n, d]`, `b: [n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorParams<F> {
    pub weight: Tensor<F>,
    pub bias: Vec<F>,
}

impl<F: Real> SelectorParams<F> {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[n, d]),
            bias: vec![F::zero(); n],
        }
    }

    /// Softmax weights for the given perspective embeddings.
    pub fn weights(&self, ps: &[&[F]]) -> Result<Vec<F>> {
        let n = self.bias.len();
        if ps.len() != n || self.weight.shape() != [n, ps[0].len()] {
            return Err(Error::ShapeMismatch {
                op: "selector",
                left: self.weight.shape().to_vec(),
                right: vec![ps.len(), ps[0].len()],
            });
        }
        let mut mean = vec![F::zero(); ps[0].len()];
        kernels::mean_of(ps, &mut mean);
        let scores: Vec<F> = self
            .weight
            .matvec(&mean)?
            .iter()
            .zip(&self.bias)
            .map(|(s, b)| *s + *b)
            .collect();
        let mut w = vec![F::zero(); n];
        kernels::softmax(&scores, &mut w);
        Ok(w)
    }
}

/// Concat-projection head: `W: [d, n d]`, `b: [d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerHeadParams<F> {
    pub weight: Tensor<F>,
    pub bias: Vec<F>,
}

impl<F: Real> TransformerHeadParams<F> {
    /// `W = (1/n) [I | I | ... | I]`, `b = 0`, which reduces to averaging.
    pub fn averaging(n: usize, d: usize) -> Self {
        let scale = F::one() / F::from_usize(n).unwrap();
        Self {
            weight: Tensor::from_fn(&[d, n * d], |i| {
                let (row, col) = (i / (n * d), i % (n * d));
                if col % d == row {
                    scale
                } else {
                    F::zero()
                }
            }),
            bias: vec![F::zero(); d],
        }
    }
}

fn check_ps<F>(ps: &[&[F]]) -> Result<usize> {
    let d = ps
        .first()
        .ok_or(Error::EmptyInput("perspective list"))?
        .len();
    for p in ps {
        if p.len() != d {
            return Err(Error::ShapeMismatch {
                op: "aggregate",
                left: vec![d],
                right: vec![p.len()],
            });
        }
    }
    Ok(d)
}

/// `head(mean(p_i))`.
pub fn aggregate_average<F: Real>(ps: &[&[F]], head: &Head<F>) -> Result<Vec<F>> {
    let d = check_ps(ps)?;
    let mut mean = vec![F::zero(); d];
    kernels::mean_of(ps, &mut mean);
    head.apply(&mean)
}

/// `head(W concat(p_1, .., p_n) + b)`, concatenating in perspective order.
pub fn aggregate_transformer<F: Real>(
    ps: &[&[F]],
    params: &TransformerHeadParams<F>,
    head: &Head<F>,
) -> Result<Vec<F>> {
    let d = check_ps(ps)?;
    if params.weight.shape() != [d, ps.len() * d] || params.bias.len() != d {
        return Err(Error::ShapeMismatch {
            op: "aggregate_transformer",
            left: params.weight.shape().to_vec(),
            right: vec![d, ps.len() * d],
        });
    }
    let concat: Vec<F> = ps.iter().flat_map(|p| p.iter().copied()).collect();
    let merged: Vec<F> = params
        .weight
        .matvec(&concat)?
        .iter()
        .zip(&params.bias)
        .map(|(x, b)| *x + *b)
        .collect();
    head.apply(&merged)
}

/// `sum_i softmax(W mean(p) + b)_i head(p_i)`; also returns the softmax weights.
pub fn aggregate_weighted<F: Real>(
    ps: &[&[F]],
    selector: &SelectorParams<F>,
    head: &Head<F>,
) -> Result<(Vec<F>, Vec<F>)> {
    check_ps(ps)?;
    let weights = selector.weights(ps)?;
    let heads = ps
        .iter()
        .map(|p| head.apply(p))
        .collect::<Result<Vec<_>>>()?;
    let slices: Vec<&[F]> = heads.iter().map(Vec::as_slice).collect();
    let mut logits = vec![F::zero(); slices[0].len()];
    kernels::weighted_sum(&weights, &slices, &mut logits);
    Ok((logits, weights))
}

/// Aggregation head with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Aggregator<F> {
    Average,
    Transformer(TransformerHeadParams<F>),
    Weighted(SelectorParams<F>),
}

impl<F: Real> Aggregator<F> {
    /// Logits plus the selector weights when there are any.
    pub fn apply(&self, ps: &[&[F]], head: &Head<F>) -> Result<(Vec<F>, Option<Vec<F>>)> {
        match self {
            Aggregator::Average => Ok((aggregate_average(ps, head)?, None)),
            Aggregator::Transformer(params) => Ok((aggregate_transformer(ps, params, head)?, None)),
            Aggregator::Weighted(sel) => {
                let (logits, w) = aggregate_weighted(ps, sel, head)?;
                Ok((logits, Some(w)))
            }
        }
    }
}
