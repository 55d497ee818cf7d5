//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Each op validates shapes,
//! computes its value eagerly and records what its backward rule needs. Node
//! inputs always have smaller ids than the node itself, so walking the list
//! backwards is a valid reverse topological order.
//!
//! Parameters enter the graph by name. [`Graph::backward`] returns gradients
//! only for parameters bound with `requires_grad = true`; frozen parameters
//! get no entry at all, and no work is spent on gradients nobody needs.

mod gradcheck;
mod tensor;

use std::collections::BTreeMap;

pub use gradcheck::{finite_diff_check, FiniteDiffReport, RESOLVABLE_MAGNITUDE};
pub use tensor::{Real, Tensor};

use crate::error::{Error, Result};
use crate::kernels::{self, WkvState};

/// Index of a node in its [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter name to gradient.
pub type Gradients<F> = BTreeMap<String, Tensor<F>>;

/// Per-parameter trainable flag.
#[derive(Debug, Clone, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct FreezeMask(BTreeMap<String, bool>);

impl FreezeMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_fn<'a>(
        names: impl IntoIterator<Item = &'a str>,
        trainable: impl Fn(&str) -> bool,
    ) -> Self {
        Self(
            names
                .into_iter()
                .map(|n| (n.to_string(), trainable(n)))
                .collect(),
        )
    }

    pub fn set(&mut self, name: impl Into<String>, trainable: bool) {
        self.0.insert(name.into(), trainable);
    }

    /// `None` for names the mask does not know about.
    pub fn get(&self, name: &str) -> Option<bool> {
        self.0.get(name).copied()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.get(name).unwrap_or(false)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, bool)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.iter().filter(|(_, t)| *t).map(|(n, _)| n)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

struct WkvCache<F> {
    /// State before each step, `[T * d]` each.
    a: Vec<F>,
    b: Vec<F>,
    p: Vec<F>,
    last: WkvState<F>,
}

enum Op<F> {
    Param(String),
    Constant,
    Add,
    Sub,
    Mul,
    Scale(F),
    AddRow,
    MulRow,
    Linear,
    MatVec,
    Sigmoid,
    Relu,
    Square,
    Exp,
    Max,
    Softmax,
    LayerNorm(Vec<F>),
    Concat,
    MeanOf,
    Mean,
    Sum,
    Embed(Vec<u32>),
    TokenShift(Vec<F>),
    Wkv(Box<WkvCache<F>>),
    WeightedSum,
    CrossEntropy { targets: Vec<u32>, probs: Vec<F> },
    Argmax,
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddRow => "add_row",
            Op::MulRow => "mul_row",
            Op::Linear => "linear",
            Op::MatVec => "matvec",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::Square => "square",
            Op::Exp => "exp",
            Op::Max => "max",
            Op::Softmax => "softmax",
            Op::LayerNorm(_) => "layer_norm",
            Op::Concat => "concat",
            Op::MeanOf => "mean_of",
            Op::Mean => "mean",
            Op::Sum => "sum",
            Op::Embed(_) => "embed",
            Op::TokenShift(_) => "token_shift",
            Op::Wkv(_) => "wkv",
            Op::WeightedSum => "weighted_sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Argmax => "argmax",
        }
    }
}

struct Node<F> {
    op: Op<F>,
    inputs: Vec<NodeId>,
    value: Tensor<F>,
    requires_grad: bool,
}

/// Append-only computation graph.
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn node(&self, id: NodeId) -> Result<&Node<F>> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id.0))
    }

    fn shape(&self, id: NodeId) -> Result<&[usize]> {
        Ok(self.node(id)?.value.shape())
    }

    fn push(&mut self, op: Op<F>, inputs: Vec<NodeId>, value: Tensor<F>) -> Result<NodeId> {
        if cfg!(debug_assertions)
            && !matches!(op, Op::Param(_) | Op::Constant)
            && !value.is_finite()
        {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Named leaf. Only leaves bound with `requires_grad` receive gradients.
    pub fn param(
        &mut self,
        name: impl Into<String>,
        value: Tensor<F>,
        requires_grad: bool,
    ) -> NodeId {
        self.nodes.push(Node {
            op: Op::Param(name.into()),
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Constant,
            inputs: Vec::new(),
            value,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn binary(&mut self, op: Op<F>, a: NodeId, b: NodeId, f: impl Fn(F, F) -> F) -> Result<NodeId> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.shape() != tb.shape() {
            return Err(mismatch(op.name(), ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(op, vec![a, b], value)
    }

    fn unary(&mut self, op: Op<F>, a: NodeId, f: impl Fn(F) -> F) -> Result<NodeId> {
        let ta = &self.node(a)?.value;
        let data = ta.data().iter().map(|x| f(*x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(op, vec![a], value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Max, a, b, |x, y| if x >= y { x } else { y })
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> Result<NodeId> {
        self.unary(Op::Scale(c), a, |x| x * c)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sigmoid, a, kernels::sigmoid)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Relu, a, |x| x.max(F::zero()))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Square, a, |x| x * x)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Exp, a, F::exp)
    }

    fn row_broadcast(
        &mut self,
        op: Op<F>,
        x: NodeId,
        row: NodeId,
        f: impl Fn(F, F) -> F,
    ) -> Result<NodeId> {
        let (tx, tr) = (&self.node(x)?.value, &self.node(row)?.value);
        if tr.shape().len() != 1 || tr.len() != tx.cols() {
            return Err(mismatch(op.name(), tx.shape(), tr.shape()));
        }
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| f(*v, tr.data()[i % c]))
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(op, vec![x, row], value)
    }

    /// Adds a `[C]` vector to every row of a `[.., C]` tensor.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        self.row_broadcast(Op::AddRow, x, row, |a, b| a + b)
    }

    /// Multiplies every row of a `[.., C]` tensor by a `[C]` vector.
    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        self.row_broadcast(Op::MulRow, x, row, |a, b| a * b)
    }

    /// `x W^T` for `x: [R, in]` and `W: [out, in]`; each output row is a
    /// `matvec` of the same row order as the inference kernels.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (tx, tw) = (&self.node(x)?.value, &self.node(w)?.value);
        if tw.shape().len() != 2 || tx.cols() != tw.shape()[1] {
            return Err(mismatch("linear", tx.shape(), tw.shape()));
        }
        let (rows, cin, cout) = (tx.rows(), tw.shape()[1], tw.shape()[0]);
        let mut out = vec![F::zero(); rows * cout];
        for r in 0..rows {
            kernels::matvec(
                tw.data(),
                cin,
                tx.row(r),
                &mut out[r * cout..(r + 1) * cout],
            );
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let value = Tensor::new(shape, out)?;
        self.push(Op::Linear, vec![x, w], value)
    }

    /// `W x` for `W: [m, k]`, `x: [k]`.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (tw, tx) = (&self.node(w)?.value, &self.node(x)?.value);
        if tx.shape().len() != 1 {
            return Err(mismatch("matvec", tw.shape(), tx.shape()));
        }
        let out = tw.matvec(tx.data())?;
        self.push(Op::MatVec, vec![w, x], Tensor::vector(out))
    }

    /// Softmax along the last dimension.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.node(x)?.value;
        let mut out = Tensor::zeros(tx.shape());
        for r in 0..tx.rows() {
            kernels::softmax(tx.row(r), out.row_mut(r));
        }
        self.push(Op::Softmax, vec![x], out)
    }

    /// Row-wise layer norm with `[C]` gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tg, tb) = (
            &self.node(x)?.value,
            &self.node(gain)?.value,
            &self.node(bias)?.value,
        );
        let c = tx.cols();
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(mismatch("layer_norm", tx.shape(), tg.shape()));
        }
        let mut out = Tensor::zeros(tx.shape());
        let mut inv = Vec::with_capacity(tx.rows());
        for r in 0..tx.rows() {
            let stats = kernels::layer_norm(tx.row(r), tg.data(), tb.data(), out.row_mut(r));
            inv.push(stats.inv_std);
        }
        self.push(Op::LayerNorm(inv), vec![x, gain, bias], out)
    }

    /// Concatenation along the last dimension, in argument order.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self
            .shape(*parts.first().ok_or(Error::EmptyInput("concat inputs"))?)?
            .to_vec();
        let rows = first[..first.len() - 1].to_vec();
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p)?;
            if s[..s.len() - 1] != rows[..] {
                return Err(mismatch("concat", &first, s));
            }
            total += s[s.len() - 1];
        }
        let nrows: usize = rows.iter().product();
        let mut out = Vec::with_capacity(nrows * total);
        for r in 0..nrows {
            for p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let mut shape = rows;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        self.push(Op::Concat, parts.to_vec(), value)
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn mean_of(&mut self, items: &[NodeId]) -> Result<NodeId> {
        let first = self
            .shape(*items.first().ok_or(Error::EmptyInput("mean_of inputs"))?)?
            .to_vec();
        for i in items {
            if self.shape(*i)? != first.as_slice() {
                return Err(mismatch("mean_of", &first, self.shape(*i)?));
            }
        }
        let slices: Vec<&[F]> = items.iter().map(|i| self.nodes[i.0].value.data()).collect();
        let mut out = vec![F::zero(); slices[0].len()];
        kernels::mean_of(&slices, &mut out);
        let value = Tensor::new(first, out)?;
        self.push(Op::MeanOf, items.to_vec(), value)
    }

    /// Mean over all elements, as a scalar.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.node(x)?.value;
        if tx.is_empty() {
            return Err(Error::EmptyInput("mean input"));
        }
        let m = tx.data().iter().copied().sum::<F>() / F::from_usize(tx.len()).unwrap();
        self.push(Op::Mean, vec![x], Tensor::scalar(m))
    }

    /// Sum over all elements, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.node(x)?.value.data().iter().copied().sum::<F>();
        self.push(Op::Sum, vec![x], Tensor::scalar(s))
    }

    /// Row lookup in a `[V, d]` table.
    pub fn embed(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let tt = &self.node(table)?.value;
        if tt.shape().len() != 2 {
            return Err(mismatch("embed", tt.shape(), &[ids.len()]));
        }
        let vocab = tt.shape()[0];
        let mut out = Vec::with_capacity(ids.len() * tt.cols());
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::TokenOutOfRange { token: id, vocab });
            }
            out.extend_from_slice(tt.row(id as usize));
        }
        let value = Tensor::new(vec![ids.len(), tt.cols()], out)?;
        self.push(Op::Embed(ids.to_vec()), vec![table], value)
    }

    /// Token-shift interpolation over a `[T, d]` sequence: row `t` becomes
    /// `mu * x[t] + (1 - mu) * x[t-1]`, with `prev` standing in for `x[-1]`.
    pub fn token_shift(&mut self, x: NodeId, mu: NodeId, prev: &[F]) -> Result<NodeId> {
        let (tx, tm) = (&self.node(x)?.value, &self.node(mu)?.value);
        let d = tx.cols();
        if tx.shape().len() != 2 || tm.shape() != [d] || prev.len() != d {
            return Err(mismatch("token_shift", tx.shape(), tm.shape()));
        }
        let mut out = Tensor::zeros(tx.shape());
        for t in 0..tx.rows() {
            let before = if t == 0 { prev } else { tx.row(t - 1) };
            kernels::token_shift(tx.row(t), before, tm.data(), out.row_mut(t));
        }
        self.push(Op::TokenShift(prev.to_vec()), vec![x, mu], out)
    }

    /// WKV recurrence over a `[T, d]` sequence of keys and values, starting from
    /// `init`; `w` is the decay rate and `u` the first-token bonus. The state
    /// after the last step is available through [`Graph::wkv_final_state`].
    pub fn wkv(
        &mut self,
        k: NodeId,
        v: NodeId,
        w: NodeId,
        u: NodeId,
        init: &WkvState<F>,
    ) -> Result<NodeId> {
        let (tk, tv, tw, tu) = (
            &self.node(k)?.value,
            &self.node(v)?.value,
            &self.node(w)?.value,
            &self.node(u)?.value,
        );
        let d = tk.cols();
        if tk.shape().len() != 2 || tk.shape() != tv.shape() {
            return Err(mismatch("wkv", tk.shape(), tv.shape()));
        }
        if tw.shape() != [d] || tu.shape() != [d] || init.dim() != d {
            return Err(mismatch("wkv", tk.shape(), tw.shape()));
        }
        let steps = tk.rows();
        let mut state = init.clone();
        let mut cache = WkvCache {
            a: Vec::with_capacity(steps * d),
            b: Vec::with_capacity(steps * d),
            p: Vec::with_capacity(steps * d),
            last: WkvState::empty(d),
        };
        let mut out = Tensor::zeros(tk.shape());
        for t in 0..steps {
            cache.a.extend_from_slice(&state.a);
            cache.b.extend_from_slice(&state.b);
            cache.p.extend_from_slice(&state.p);
            kernels::wkv_step(
                &mut state,
                tk.row(t),
                tv.row(t),
                tw.data(),
                tu.data(),
                out.row_mut(t),
            );
        }
        cache.last = state;
        self.push(Op::Wkv(Box::new(cache)), vec![k, v, w, u], out)
    }

    pub fn wkv_final_state(&self, id: NodeId) -> Option<&WkvState<F>> {
        match &self.nodes.get(id.0)?.op {
            Op::Wkv(cache) => Some(&cache.last),
            _ => None,
        }
    }

    /// Row-wise `sum_i weights[:, i] * items[i]` for `weights: [R, n]` and `n`
    /// items of shape `[R, C]`.
    pub fn weighted_sum(&mut self, weights: NodeId, items: &[NodeId]) -> Result<NodeId> {
        let tw = &self.node(weights)?.value;
        let n = items.len();
        if n == 0 || tw.cols() != n {
            return Err(mismatch("weighted_sum", tw.shape(), &[n]));
        }
        let shape = self.shape(items[0])?.to_vec();
        for i in items {
            if self.shape(*i)? != shape.as_slice() || self.value(*i).rows() != tw.rows() {
                return Err(mismatch("weighted_sum", &shape, self.shape(*i)?));
            }
        }
        let rows = tw.rows();
        let c = shape[shape.len() - 1];
        let mut out = vec![F::zero(); rows * c];
        for r in 0..rows {
            let slices: Vec<&[F]> = items.iter().map(|i| self.nodes[i.0].value.row(r)).collect();
            kernels::weighted_sum(tw.row(r), &slices, &mut out[r * c..(r + 1) * c]);
        }
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![weights];
        inputs.extend_from_slice(items);
        self.push(Op::WeightedSum, inputs, value)
    }

    /// Mean next-token cross-entropy of `[T, V]` logits against `targets`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32]) -> Result<NodeId> {
        let tl = &self.node(logits)?.value;
        if tl.shape().len() != 2 || tl.rows() != targets.len() {
            return Err(mismatch("cross_entropy", tl.shape(), &[targets.len()]));
        }
        if targets.is_empty() {
            return Err(Error::EmptyInput("cross_entropy targets"));
        }
        let vocab = tl.cols();
        let mut probs = vec![F::zero(); tl.len()];
        let mut total = F::zero();
        for (t, &target) in targets.iter().enumerate() {
            if target as usize >= vocab {
                return Err(Error::TokenOutOfRange {
                    token: target,
                    vocab,
                });
            }
            let row = tl.row(t);
            let lse = kernels::log_sum_exp(row);
            total = total + (lse - row[target as usize]);
            for (p, x) in probs[t * vocab..(t + 1) * vocab].iter_mut().zip(row) {
                *p = (*x - lse).exp();
            }
        }
        let loss = total / F::from_usize(targets.len()).unwrap();
        self.push(
            Op::CrossEntropy {
                targets: targets.to_vec(),
                probs,
            },
            vec![logits],
            Tensor::scalar(loss),
        )
    }

    /// Row-wise argmax, as indices stored in the value type. Not differentiable.
    pub fn argmax(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.node(x)?.value;
        let data = (0..tx.rows())
            .map(|r| F::from_usize(kernels::argmax(tx.row(r))).unwrap())
            .collect();
        self.push(Op::Argmax, vec![x], Tensor::vector(data))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>> {
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), F::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Param(_) = node.op {
                grads[id] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
        }
        let mut out = Gradients::new();
        for (id, node) in self.nodes[..=loss.0].iter().enumerate() {
            if let (Op::Param(name), true) = (&node.op, node.requires_grad) {
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match out.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node<F>,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let inputs = &node.inputs;
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        let wants = |i: usize| self.nodes[inputs[i].0].requires_grad;
        let gd = g.data();
        // Adds `contrib` into the gradient slot of input `i`.
        let mut acc = |i: usize, contrib: Tensor<F>| {
            let slot = &mut grads[inputs[i].0];
            match slot {
                Some(t) => t.add_assign(&contrib),
                None => *slot = Some(contrib),
            }
        };
        let like = |i: usize, data: Vec<F>| {
            Tensor::new(self.nodes[inputs[i].0].value.shape().to_vec(), data)
        };
        let zero = F::zero();
        let one = F::one();

        match &node.op {
            Op::Param(_) | Op::Constant => {}
            Op::Add => {
                for i in 0..2 {
                    if wants(i) {
                        acc(i, g.clone());
                    }
                }
            }
            Op::Sub => {
                if wants(0) {
                    acc(0, g.clone());
                }
                if wants(1) {
                    acc(1, like(1, gd.iter().map(|x| -*x).collect())?);
                }
            }
            Op::Mul => {
                for (i, other) in [(0, 1), (1, 0)] {
                    if wants(i) {
                        let o = val(other).data();
                        acc(
                            i,
                            like(i, gd.iter().zip(o).map(|(a, b)| *a * *b).collect())?,
                        );
                    }
                }
            }
            Op::Max => {
                let (a, b) = (val(0).data(), val(1).data());
                if wants(0) {
                    let d = (0..gd.len())
                        .map(|j| if a[j] >= b[j] { gd[j] } else { zero })
                        .collect();
                    acc(0, like(0, d)?);
                }
                if wants(1) {
                    let d = (0..gd.len())
                        .map(|j| if a[j] >= b[j] { zero } else { gd[j] })
                        .collect();
                    acc(1, like(1, d)?);
                }
            }
            Op::Scale(c) => acc(0, like(0, gd.iter().map(|x| *x * *c).collect())?),
            Op::Sigmoid => {
                let y = node.value.data();
                acc(
                    0,
                    like(
                        0,
                        (0..gd.len()).map(|j| gd[j] * y[j] * (one - y[j])).collect(),
                    )?,
                );
            }
            Op::Relu => {
                let x = val(0).data();
                acc(
                    0,
                    like(
                        0,
                        (0..gd.len())
                            .map(|j| if x[j] > zero { gd[j] } else { zero })
                            .collect(),
                    )?,
                );
            }
            Op::Square => {
                let x = val(0).data();
                let two = F::lit(2.0);
                acc(
                    0,
                    like(0, (0..gd.len()).map(|j| two * x[j] * gd[j]).collect())?,
                );
            }
            Op::Exp => {
                let y = node.value.data();
                acc(0, like(0, (0..gd.len()).map(|j| gd[j] * y[j]).collect())?);
            }
            Op::AddRow | Op::MulRow => {
                let (x, r) = (val(0), val(1));
                let c = x.cols();
                let is_mul = matches!(node.op, Op::MulRow);
                if wants(0) {
                    let d = if is_mul {
                        (0..gd.len()).map(|j| gd[j] * r.data()[j % c]).collect()
                    } else {
                        gd.to_vec()
                    };
                    acc(0, like(0, d)?);
                }
                if wants(1) {
                    let mut d = vec![zero; c];
                    for (j, gv) in gd.iter().enumerate() {
                        d[j % c] = d[j % c] + if is_mul { *gv * x.data()[j] } else { *gv };
                    }
                    acc(1, like(1, d)?);
                }
            }
            Op::Linear => {
                let (x, w) = (val(0), val(1));
                let (cout, cin) = (w.shape()[0], w.shape()[1]);
                let rows = x.rows();
                if wants(0) {
                    let mut d = vec![zero; rows * cin];
                    for r in 0..rows {
                        let dr = &mut d[r * cin..(r + 1) * cin];
                        for o in 0..cout {
                            let go = gd[r * cout + o];
                            if go == zero {
                                continue;
                            }
                            for (di, wi) in dr.iter_mut().zip(w.row(o)) {
                                *di = *di + go * *wi;
                            }
                        }
                    }
                    acc(0, like(0, d)?);
                }
                if wants(1) {
                    let mut d = vec![zero; cout * cin];
                    for r in 0..rows {
                        let xr = x.row(r);
                        for o in 0..cout {
                            let go = gd[r * cout + o];
                            if go == zero {
                                continue;
                            }
                            for (di, xi) in d[o * cin..(o + 1) * cin].iter_mut().zip(xr) {
                                *di = *di + go * *xi;
                            }
                        }
                    }
                    acc(1, like(1, d)?);
                }
            }
            Op::MatVec => {
                let (w, x) = (val(0), val(1));
                let (m, k) = (w.shape()[0], w.shape()[1]);
                if wants(0) {
                    let d = (0..m * k).map(|j| gd[j / k] * x.data()[j % k]).collect();
                    acc(0, like(0, d)?);
                }
                if wants(1) {
                    let mut d = vec![zero; k];
                    for i in 0..m {
                        for (dj, wj) in d.iter_mut().zip(w.row(i)) {
                            *dj = *dj + gd[i] * *wj;
                        }
                    }
                    acc(1, like(1, d)?);
                }
            }
            Op::Softmax => {
                let y = &node.value;
                let c = y.cols();
                let mut d = vec![zero; gd.len()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), &gd[r * c..(r + 1) * c]);
                    let inner = kernels::dot(yr, gr);
                    for j in 0..c {
                        d[r * c + j] = yr[j] * (gr[j] - inner);
                    }
                }
                acc(0, like(0, d)?);
            }
            Op::LayerNorm(inv) => {
                let (x, gain) = (val(0), val(1));
                let c = x.cols();
                let n = F::from_usize(c).unwrap();
                let mut dx = vec![zero; gd.len()];
                let mut dgain = vec![zero; c];
                let mut dbias = vec![zero; c];
                let eps_inv = one / F::lit(kernels::LAYER_NORM_EPS).sqrt();
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let gr = &gd[r * c..(r + 1) * c];
                    let constant = inv[r] == zero;
                    let inv_std = if constant { eps_inv } else { inv[r] };
                    let mean = xr.iter().copied().sum::<F>() / n;
                    let xhat: Vec<F> = if constant {
                        vec![zero; c]
                    } else {
                        xr.iter().map(|v| (*v - mean) * inv_std).collect()
                    };
                    let mut m1 = zero;
                    let mut m2 = zero;
                    for j in 0..c {
                        let dxh = gr[j] * gain.data()[j];
                        m1 = m1 + dxh;
                        m2 = m2 + dxh * xhat[j];
                        dgain[j] = dgain[j] + gr[j] * xhat[j];
                        dbias[j] = dbias[j] + gr[j];
                    }
                    m1 = m1 / n;
                    m2 = m2 / n;
                    for j in 0..c {
                        let dxh = gr[j] * gain.data()[j];
                        dx[r * c + j] = inv_std * (dxh - m1 - xhat[j] * m2);
                    }
                }
                if wants(0) {
                    acc(0, like(0, dx)?);
                }
                if wants(1) {
                    acc(1, like(1, dgain)?);
                }
                if wants(2) {
                    acc(2, like(2, dbias)?);
                }
            }
            Op::Concat => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for i in 0..inputs.len() {
                    let c = val(i).cols();
                    if wants(i) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + c]);
                        }
                        acc(i, like(i, d)?);
                    }
                    offset += c;
                }
            }
            Op::MeanOf => {
                let n = F::from_usize(inputs.len()).unwrap();
                for i in 0..inputs.len() {
                    if wants(i) {
                        acc(i, like(i, gd.iter().map(|x| *x / n).collect())?);
                    }
                }
            }
            Op::Mean => {
                let len = val(0).len();
                let share = gd[0] / F::from_usize(len).unwrap();
                acc(0, like(0, vec![share; len])?);
            }
            Op::Sum => acc(0, like(0, vec![gd[0]; val(0).len()])?),
            Op::Embed(ids) => {
                let table = val(0);
                let c = table.cols();
                let mut d = vec![zero; table.len()];
                for (t, &id) in ids.iter().enumerate() {
                    let dst = &mut d[id as usize * c..(id as usize + 1) * c];
                    for (a, b) in dst.iter_mut().zip(&gd[t * c..(t + 1) * c]) {
                        *a = *a + *b;
                    }
                }
                acc(0, like(0, d)?);
            }
            Op::TokenShift(prev) => {
                let (x, mu) = (val(0), val(1).data());
                let c = x.cols();
                let steps = x.rows();
                if wants(0) {
                    let mut d = vec![zero; gd.len()];
                    for t in 0..steps {
                        for j in 0..c {
                            let mut v = gd[t * c + j] * mu[j];
                            if t + 1 < steps {
                                v = v + gd[(t + 1) * c + j] * (one - mu[j]);
                            }
                            d[t * c + j] = v;
                        }
                    }
                    acc(0, like(0, d)?);
                }
                if wants(1) {
                    let mut d = vec![zero; c];
                    for t in 0..steps {
                        let before = if t == 0 {
                            prev.as_slice()
                        } else {
                            x.row(t - 1)
                        };
                        for j in 0..c {
                            d[j] = d[j] + gd[t * c + j] * (x.row(t)[j] - before[j]);
                        }
                    }
                    acc(1, like(1, d)?);
                }
            }
            Op::Wkv(cache) => {
                let (k, v, w, u) = (val(0), val(1), val(2).data(), val(3).data());
                let c = k.cols();
                let steps = k.rows();
                let mut dk = vec![zero; k.len()];
                let mut dv = vec![zero; k.len()];
                let mut dw = vec![zero; c];
                let mut du = vec![zero; c];
                for ch in 0..c {
                    // Adjoints of the (scaled) state after the current step.
                    let mut ga = zero;
                    let mut gb = zero;
                    for t in (0..steps).rev() {
                        let j = t * c + ch;
                        let (a, b, p) = (cache.a[j], cache.b[j], cache.p[j]);
                        let (kt, vt) = (k.data()[j], v.data()[j]);
                        let decayed = p - w[ch];
                        let q2 = decayed.max(kt);
                        let f1 = (decayed - q2).exp();
                        let f2 = (kt - q2).exp();
                        dv[j] = dv[j] + ga * f2;
                        dk[j] = dk[j] + ga * f2 * vt + gb * f2;
                        if ga != zero || gb != zero {
                            dw[ch] = dw[ch] - f1 * (ga * a + gb * b);
                        }
                        let mut na = ga * f1;
                        let mut nb = gb * f1;

                        let gt = gd[j];
                        let uk = u[ch] + kt;
                        let q = p.max(uk);
                        let e1 = (p - q).exp();
                        let e2 = (uk - q).exp();
                        let den = e1 * b + e2;
                        let y = (e1 * a + e2 * vt) / den;
                        dv[j] = dv[j] + gt * e2 / den;
                        let dkd = gt * e2 * (vt - y) / den;
                        dk[j] = dk[j] + dkd;
                        du[ch] = du[ch] + dkd;
                        na = na + gt * e1 / den;
                        nb = nb - gt * y * e1 / den;
                        ga = na;
                        gb = nb;
                    }
                }
                for (i, d) in [dk, dv, dw, du].into_iter().enumerate() {
                    if wants(i) {
                        acc(i, like(i, d)?);
                    }
                }
            }
            Op::WeightedSum => {
                let weights = val(0);
                let n = weights.cols();
                let rows = weights.rows();
                let c = node.value.cols();
                if wants(0) {
                    let mut d = vec![zero; weights.len()];
                    for r in 0..rows {
                        let gr = &gd[r * c..(r + 1) * c];
                        for i in 0..n {
                            d[r * n + i] = kernels::dot(gr, val(i + 1).row(r));
                        }
                    }
                    acc(0, like(0, d)?);
                }
                for i in 0..n {
                    if wants(i + 1) {
                        let d = (0..gd.len())
                            .map(|j| gd[j] * weights.data()[(j / c) * n + i])
                            .collect();
                        acc(i + 1, like(i + 1, d)?);
                    }
                }
            }
            Op::CrossEntropy { targets, probs } => {
                let vocab = val(0).cols();
                let scale = gd[0] / F::from_usize(targets.len()).unwrap();
                let mut d: Vec<F> = probs.iter().map(|p| *p * scale).collect();
                for (t, &target) in targets.iter().enumerate() {
                    let j = t * vocab + target as usize;
                    d[j] = d[j] - scale;
                }
                acc(0, like(0, d)?);
            }
            Op::Argmax => return Err(Error::NonDifferentiable { op: "argmax" }),
        }
        Ok(())
    }
}
