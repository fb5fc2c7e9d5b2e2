use crate::error::{Error, Result};

use super::{Tensor, LAYER_NORM_EPS};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    Log(NodeId),
    Scale(NodeId, f64),
    Softmax(NodeId, usize),
    LogSoftmax(NodeId, usize),
    LayerNorm(NodeId, usize),
    EmbedLookup(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    SliceRows(NodeId, usize, usize),
    Sum(NodeId),
    Mean(NodeId),
    MseLoss(NodeId, NodeId),
    Attention {
        queries: NodeId,
        keys: NodeId,
        values: NodeId,
        heads: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of operations; topological order is insertion order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the given node, if the node
    /// participates in the graph.
    pub fn wrt(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Insert a constant leaf (no gradient tracked).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Insert a differentiable leaf (parameter or input we differentiate
    /// against).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite tensor produced by {op:?}");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn tracked(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Elementwise addition. The right operand may be a suffix-shaped bias
    /// broadcast over the leading axes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = broadcast_zip(self.value(a), self.value(b), "add", |x, y| x + y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), tracked))
    }

    /// Elementwise product, with the same suffix broadcasting as [`Graph::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = broadcast_zip(self.value(a), self.value(b), "multiply", |x, y| x * y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), tracked))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), tracked))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| v.max(0.0)).collect(),
        };
        let tracked = self.tracked(&[x]);
        self.push(out, Op::Relu(x), tracked)
    }

    /// Natural logarithm; inputs must be strictly positive.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        if t.data.iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("log requires strictly positive inputs"));
        }
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| v.ln()).collect(),
        };
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::Log(x), tracked))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| c * v).collect(),
        };
        let tracked = self.tracked(&[x]);
        self.push(out, Op::Scale(x, c), tracked)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let t = self.value(x);
        check_axis(t.shape(), axis, "softmax")?;
        let mut out = t.data.clone();
        for_each_lane(t.shape(), axis, |idx| {
            let mx = idx.iter().map(|&i| out[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &i in idx {
                out[i] = (out[i] - mx).exp();
                sum += out[i];
            }
            for &i in idx {
                out[i] /= sum;
            }
        });
        let out = Tensor {
            shape: t.shape.clone(),
            data: out,
        };
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::Softmax(x, axis), tracked))
    }

    /// Numerically stable `x - logsumexp(x)` along `axis`.
    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let t = self.value(x);
        check_axis(t.shape(), axis, "log_softmax")?;
        let mut out = t.data.clone();
        for_each_lane(t.shape(), axis, |idx| {
            let mx = idx.iter().map(|&i| out[i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + idx.iter().map(|&i| (out[i] - mx).exp()).sum::<f64>().ln();
            for &i in idx {
                out[i] -= lse;
            }
        });
        let out = Tensor {
            shape: t.shape.clone(),
            data: out,
        };
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::LogSoftmax(x, axis), tracked))
    }

    /// Normalize to zero mean and unit variance along `axis` (no affine
    /// rescale; apply learned scale/shift separately).
    pub fn layer_norm(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let t = self.value(x);
        check_axis(t.shape(), axis, "layer_norm")?;
        let mut out = t.data.clone();
        for_each_lane(t.shape(), axis, |idx| {
            let n = idx.len() as f64;
            let mean: f64 = idx.iter().map(|&i| out[i]).sum::<f64>() / n;
            let var: f64 = idx.iter().map(|&i| (out[i] - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for &i in idx {
                out[i] = (out[i] - mean) * inv;
            }
        });
        let out = Tensor {
            shape: t.shape.clone(),
            data: out,
        };
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::LayerNorm(x, axis), tracked))
    }

    /// Gather rows of a `[vocab, dim]` table.
    pub fn embed_lookup(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let s = t.shape();
        if s.len() != 2 {
            return Err(shape_err("embed_lookup", s, &[indices.len()]));
        }
        let dim = s[1];
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            if i >= s[0] {
                return Err(Error::invalid(format!(
                    "embedding index {i} out of range for table with {} rows",
                    s[0]
                )));
            }
            data.extend_from_slice(&t.data[i * dim..(i + 1) * dim]);
        }
        let out = Tensor::new(vec![indices.len(), dim], data)?;
        let tracked = self.tracked(&[table]);
        Ok(self.push(out, Op::EmbedLookup(table, indices.to_vec()), tracked))
    }

    /// Concatenate along `axis`; all other dimensions must match.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        check_axis(&first, axis, "concat")?;
        let mut axis_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(shape_err("concat", &first, s));
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; shape.iter().product()];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let d_axis = t.shape()[axis];
            for o in 0..outer {
                let src = &t.data[o * d_axis * inner..(o + 1) * d_axis * inner];
                let dst_start = (o * axis_total + offset) * inner;
                data[dst_start..dst_start + d_axis * inner].copy_from_slice(src);
            }
            offset += d_axis;
        }
        let out = Tensor::new(shape, data)?;
        let tracked = self.tracked(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), tracked))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 2 || start >= end || end > s[0] {
            return Err(Error::invalid(format!(
                "slice_rows {start}..{end} invalid for shape {s:?}"
            )));
        }
        let cols = s[1];
        let data = t.data[start * cols..end * cols].to_vec();
        let out = Tensor::new(vec![end - start, cols], data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::SliceRows(x, start, end), tracked))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let t = Tensor::scalar(self.value(x).data.iter().sum());
        let tracked = self.tracked(&[x]);
        self.push(t, Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let t = Tensor::scalar(v.data.iter().sum::<f64>() / v.numel() as f64);
        let tracked = self.tracked(&[x]);
        self.push(t, Op::Mean(x), tracked)
    }

    /// Mean squared error between two same-shaped tensors.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(shape_err("mse_loss", p.shape(), t.shape()));
        }
        let n = p.numel() as f64;
        let loss = p
            .data
            .iter()
            .zip(&t.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let tracked = self.tracked(&[pred, target]);
        Ok(self.push(Tensor::scalar(loss), Op::MseLoss(pred, target), tracked))
    }

    /// Multi-head scaled dot-product attention over full sequences (no
    /// mask): per head, `softmax(Q Kᵀ / √d_head) V`, heads concatenated.
    pub fn attention(
        &mut self,
        queries: NodeId,
        keys: NodeId,
        values: NodeId,
        heads: usize,
    ) -> Result<NodeId> {
        let (q, k, v) = (self.value(queries), self.value(keys), self.value(values));
        let (sq, sk, sv) = (q.shape(), k.shape(), v.shape());
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 {
            return Err(shape_err("attention", sq, sk));
        }
        let dim = sq[1];
        if sk[1] != dim || sv[1] != dim || sk[0] != sv[0] {
            return Err(shape_err("attention", sk, sv));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!(
                "attention: {heads} heads do not divide model dim {dim}"
            )));
        }
        let out = attention_forward(q, k, v, heads)?;
        let tracked = self.tracked(&[queries, keys, values]);
        Ok(self.push(
            out,
            Op::Attention {
                queries,
                keys,
                values,
                heads,
            },
            tracked,
        ))
    }

    /// Reverse pass from a scalar loss. Gradients accumulate additively
    /// across fan-out; each node is visited exactly once in reverse
    /// topological (= reverse insertion) order.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.accumulate(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut add_to = |id: NodeId, contrib: Vec<f64>| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(g) => {
                    for (gi, ci) in g.iter_mut().zip(&contrib) {
                        *gi += ci;
                    }
                }
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(*a, gout.to_vec());
                add_to(*b, reduce_to_shape(gout, self.value(*b).numel()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let nb = tb.numel();
                let ga: Vec<f64> = gout
                    .iter()
                    .enumerate()
                    .map(|(j, g)| g * tb.data[j % nb])
                    .collect();
                let mut gb = vec![0.0; nb];
                for (j, g) in gout.iter().enumerate() {
                    gb[j % nb] += g * ta.data[j];
                }
                add_to(*a, ga);
                add_to(*b, gb);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                // dA = dC Bᵀ, dB = Aᵀ dC
                let mut ga = vec![0.0; m * k];
                for i0 in 0..m {
                    for j in 0..k {
                        let mut acc = 0.0;
                        for c in 0..n {
                            acc += gout[i0 * n + c] * tb.data[j * n + c];
                        }
                        ga[i0 * k + j] = acc;
                    }
                }
                let mut gb = vec![0.0; k * n];
                for j in 0..k {
                    for c in 0..n {
                        let mut acc = 0.0;
                        for i0 in 0..m {
                            acc += ta.data[i0 * k + j] * gout[i0 * n + c];
                        }
                        gb[j * n + c] = acc;
                    }
                }
                add_to(*a, ga);
                add_to(*b, gb);
            }
            Op::Relu(x) => {
                let t = self.value(*x);
                let gx = gout
                    .iter()
                    .zip(&t.data)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                add_to(*x, gx);
            }
            Op::Log(x) => {
                let t = self.value(*x);
                let gx = gout.iter().zip(&t.data).map(|(g, &v)| g / v).collect();
                add_to(*x, gx);
            }
            Op::Scale(x, c) => {
                add_to(*x, gout.iter().map(|g| g * c).collect());
            }
            Op::Softmax(x, axis) => {
                let y = &node.value;
                let mut gx = vec![0.0; y.numel()];
                for_each_lane(y.shape(), *axis, |idx| {
                    let dot: f64 = idx.iter().map(|&j| gout[j] * y.data[j]).sum();
                    for &j in idx {
                        gx[j] = y.data[j] * (gout[j] - dot);
                    }
                });
                add_to(*x, gx);
            }
            Op::LogSoftmax(x, axis) => {
                // y = x - lse(x); dx = dy - softmax(x) * sum(dy) per lane.
                let y = &node.value;
                let mut gx = vec![0.0; y.numel()];
                for_each_lane(y.shape(), *axis, |idx| {
                    let gsum: f64 = idx.iter().map(|&j| gout[j]).sum();
                    for &j in idx {
                        gx[j] = gout[j] - y.data[j].exp() * gsum;
                    }
                });
                add_to(*x, gx);
            }
            Op::LayerNorm(x, axis) => {
                let t = self.value(*x);
                let y = &node.value;
                let mut gx = vec![0.0; t.numel()];
                for_each_lane(t.shape(), *axis, |idx| {
                    let n = idx.len() as f64;
                    let mean: f64 = idx.iter().map(|&j| t.data[j]).sum::<f64>() / n;
                    let var: f64 =
                        idx.iter().map(|&j| (t.data[j] - mean).powi(2)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let g_mean: f64 = idx.iter().map(|&j| gout[j]).sum::<f64>() / n;
                    let gy_dot: f64 = idx.iter().map(|&j| gout[j] * y.data[j]).sum::<f64>() / n;
                    for &j in idx {
                        gx[j] = inv * (gout[j] - g_mean - y.data[j] * gy_dot);
                    }
                });
                add_to(*x, gx);
            }
            Op::EmbedLookup(table, indices) => {
                let t = self.value(*table);
                let dim = t.shape()[1];
                let mut gt = vec![0.0; t.numel()];
                for (row, &i) in indices.iter().enumerate() {
                    for d in 0..dim {
                        gt[i * dim + d] += gout[row * dim + d];
                    }
                }
                add_to(*table, gt);
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let axis_total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let d_axis = self.value(p).shape()[*axis];
                    let mut gp = vec![0.0; d_axis * outer * inner];
                    for o in 0..outer {
                        let src_start = (o * axis_total + offset) * inner;
                        gp[o * d_axis * inner..(o + 1) * d_axis * inner]
                            .copy_from_slice(&gout[src_start..src_start + d_axis * inner]);
                    }
                    add_to(p, gp);
                    offset += d_axis;
                }
            }
            Op::SliceRows(x, start, end) => {
                let t = self.value(*x);
                let cols = t.shape()[1];
                let mut gx = vec![0.0; t.numel()];
                gx[start * cols..end * cols].copy_from_slice(gout);
                add_to(*x, gx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                add_to(*x, vec![gout[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                add_to(*x, vec![gout[0] / n as f64; n]);
            }
            Op::MseLoss(pred, target) => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let n = p.numel() as f64;
                let gp: Vec<f64> = p
                    .data
                    .iter()
                    .zip(&t.data)
                    .map(|(x, y)| gout[0] * 2.0 * (x - y) / n)
                    .collect();
                let gt: Vec<f64> = gp.iter().map(|g| -g).collect();
                add_to(*pred, gp);
                add_to(*target, gt);
            }
            Op::Attention {
                queries,
                keys,
                values,
                heads,
            } => {
                let (q, k, v) = (self.value(*queries), self.value(*keys), self.value(*values));
                let (gq, gk, gv) = attention_backward(q, k, v, *heads, gout);
                add_to(*queries, gq);
                add_to(*keys, gk);
                add_to(*values, gv);
            }
        }
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn check_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::invalid(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

/// Apply `f` to the flat indices of every lane along `axis`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let d = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut idx = vec![0usize; d];
    for o in 0..outer {
        for i in 0..inner {
            for (j, slot) in idx.iter_mut().enumerate() {
                *slot = (o * d + j) * inner + i;
            }
            f(&idx);
        }
    }
}

/// Elementwise binary op where `b`'s shape may be a suffix of `a`'s
/// (bias-style broadcast over the leading axes).
fn broadcast_zip(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    let suffix_ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
    if !suffix_ok {
        return Err(shape_err(op, sa, sb));
    }
    let nb = b.numel().max(1);
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, b.data()[i % nb]))
        .collect();
    Tensor::new(sa.to_vec(), data)
}

/// Sum-reduce a gradient over leading axes down to `numel` elements.
fn reduce_to_shape(g: &[f64], numel: usize) -> Vec<f64> {
    if g.len() == numel {
        return g.to_vec();
    }
    let mut out = vec![0.0; numel.max(1)];
    for (i, v) in g.iter().enumerate() {
        out[i % numel.max(1)] += v;
    }
    out
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for j in 0..k {
            let aij = a[i * k + j];
            if aij == 0.0 {
                continue;
            }
            let brow = &b[j * n..(j + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aij * bv;
            }
        }
    }
}

fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (nq, dim) = (q.shape()[0], q.shape()[1]);
    let nk = k.shape()[0];
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; nq * dim];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..nq {
            // logits over keys for query i, head h
            let mut logits = vec![0.0; nk];
            for (j, logit) in logits.iter_mut().enumerate() {
                let mut acc = 0.0;
                for d in 0..dh {
                    acc += q.data()[i * dim + off + d] * k.data()[j * dim + off + d];
                }
                *logit = acc * scale;
            }
            softmax_inplace(&mut logits);
            for (j, &p) in logits.iter().enumerate() {
                for d in 0..dh {
                    out[i * dim + off + d] += p * v.data()[j * dim + off + d];
                }
            }
        }
    }
    Tensor::new(vec![nq, dim], out)
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (nq, dim) = (q.shape()[0], q.shape()[1]);
    let nk = k.shape()[0];
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = vec![0.0; nq * dim];
    let mut gk = vec![0.0; nk * dim];
    let mut gv = vec![0.0; nk * dim];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..nq {
            let mut probs = vec![0.0; nk];
            for (j, p) in probs.iter_mut().enumerate() {
                let mut acc = 0.0;
                for d in 0..dh {
                    acc += q.data()[i * dim + off + d] * k.data()[j * dim + off + d];
                }
                *p = acc * scale;
            }
            softmax_inplace(&mut probs);
            // dP[j] = <gout_i, V_j>, then softmax backward to dS.
            let mut dp = vec![0.0; nk];
            for (j, slot) in dp.iter_mut().enumerate() {
                let mut acc = 0.0;
                for d in 0..dh {
                    acc += gout[i * dim + off + d] * v.data()[j * dim + off + d];
                }
                *slot = acc;
            }
            let dot: f64 = dp.iter().zip(&probs).map(|(a, b)| a * b).sum();
            for j in 0..nk {
                let ds = probs[j] * (dp[j] - dot) * scale;
                for d in 0..dh {
                    gq[i * dim + off + d] += ds * k.data()[j * dim + off + d];
                    gk[j * dim + off + d] += ds * q.data()[i * dim + off + d];
                    gv[j * dim + off + d] += probs[j] * gout[i * dim + off + d];
                }
            }
        }
    }
    (gq, gk, gv)
}

fn softmax_inplace(x: &mut [f64]) {
    let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}
