//! Slice-level numeric kernels.
//!
//! Both the recurrent inference path and the differentiable graph call these
//! same functions, so the two produce bit-identical values for identical inputs.

use crate::autograd::Real;

/// Variance floor inside the layer-norm denominator.
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b) {
        acc = acc + *x * *y;
    }
    acc
}

/// `out[i] = sum_j w[i, j] x[j]` for a row-major matrix with `cols` columns.
pub fn matvec<F: Real>(w: &[F], cols: usize, x: &[F], out: &mut [F]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = dot(row, x);
    }
}

pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// `mu * x + (1 - mu) * prev`, elementwise.
pub fn token_shift<F: Real>(x: &[F], prev: &[F], mu: &[F], out: &mut [F]) {
    for i in 0..out.len() {
        out[i] = mu[i] * x[i] + (F::one() - mu[i]) * prev[i];
    }
}

/// Intermediate values of a layer norm needed by its backward rule.
pub struct LayerNormStats<F> {
    /// `1 / sqrt(var + eps)`, or zero for a constant input.
    pub inv_std: F,
}

/// Layer norm with gain and bias. A constant input maps to the bias.
pub fn layer_norm<F: Real>(x: &[F], gain: &[F], bias: &[F], out: &mut [F]) -> LayerNormStats<F> {
    let n = F::from_usize(x.len()).unwrap();
    let constant = x.iter().all(|v| *v == x[0]);
    if constant {
        out.copy_from_slice(bias);
        return LayerNormStats { inv_std: F::zero() };
    }
    let mean = x.iter().copied().sum::<F>() / n;
    let mut var = F::zero();
    for v in x {
        let c = *v - mean;
        var = var + c * c;
    }
    var = var / n;
    let inv_std = F::one() / (var + F::lit(LAYER_NORM_EPS)).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * inv_std * gain[i] + bias[i];
    }
    LayerNormStats { inv_std }
}

/// Numerically stabilized WKV accumulators for one time-mixing block.
///
/// `a` and `b` hold the weighted value sum and weight sum scaled by `exp(-p)`.
/// The empty state is `a = b = 0`, `p = -inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct WkvState<F> {
    pub a: Vec<F>,
    pub b: Vec<F>,
    pub p: Vec<F>,
}

impl<F: Real> WkvState<F> {
    pub fn empty(dim: usize) -> Self {
        Self {
            a: vec![F::zero(); dim],
            b: vec![F::zero(); dim],
            p: vec![F::neg_infinity(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }
}

/// Output of one channel of the WKV recurrence.
#[inline]
pub fn wkv_output<F: Real>(a: F, b: F, p: F, k: F, v: F, u: F) -> F {
    let uk = u + k;
    let q = p.max(uk);
    let e1 = (p - q).exp();
    let e2 = (uk - q).exp();
    (e1 * a + e2 * v) / (e1 * b + e2)
}

/// State update for one channel; `w` is the (non-negative) decay rate.
#[inline]
pub fn wkv_update<F: Real>(a: F, b: F, p: F, k: F, v: F, w: F) -> (F, F, F) {
    let decayed = p - w;
    let q = decayed.max(k);
    let e1 = (decayed - q).exp();
    let e2 = (k - q).exp();
    (e1 * a + e2 * v, e1 * b + e2, q)
}

/// One step of the WKV recurrence over all channels; writes the output into
/// `out` and advances `state`.
pub fn wkv_step<F: Real>(
    state: &mut WkvState<F>,
    k: &[F],
    v: &[F],
    w: &[F],
    u: &[F],
    out: &mut [F],
) {
    for c in 0..out.len() {
        let (a, b, p) = (state.a[c], state.b[c], state.p[c]);
        out[c] = wkv_output(a, b, p, k[c], v[c], u[c]);
        let (a, b, p) = wkv_update(a, b, p, k[c], v[c], w[c]);
        state.a[c] = a;
        state.b[c] = b;
        state.p[c] = p;
    }
}

/// Elementwise mean of equally sized slices, accumulated in slice order.
pub fn mean_of<F: Real>(items: &[&[F]], out: &mut [F]) {
    out.copy_from_slice(items[0]);
    for item in &items[1..] {
        for (o, x) in out.iter_mut().zip(item.iter()) {
            *o = *o + *x;
        }
    }
    let n = F::from_usize(items.len()).unwrap();
    for o in out.iter_mut() {
        *o = *o / n;
    }
}

/// Numerically stable softmax.
pub fn softmax<F: Real>(x: &[F], out: &mut [F]) {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for (o, v) in out.iter_mut().zip(x) {
        *o = (*v - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

/// `log(sum(exp(x)))` computed around the maximum.
pub fn log_sum_exp<F: Real>(x: &[F]) -> F {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return max;
    }
    let total: F = x.iter().map(|v| (*v - max).exp()).sum();
    max + total.ln()
}

/// `sum_i weights[i] * items[i]`, accumulated in item order starting from the
/// first term (not from zero).
pub fn weighted_sum<F: Real>(weights: &[F], items: &[&[F]], out: &mut [F]) {
    for (o, x) in out.iter_mut().zip(items[0].iter()) {
        *o = weights[0] * *x;
    }
    for (w, item) in weights[1..].iter().zip(&items[1..]) {
        for (o, x) in out.iter_mut().zip(item.iter()) {
            *o = *o + *w * *x;
        }
    }
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax<F: Real>(x: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}
