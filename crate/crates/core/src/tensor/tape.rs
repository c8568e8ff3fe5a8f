//! Computation tape: records operations forward, replays them in reverse.
//!
//! Nodes reference only earlier nodes, so reverse creation order is a valid
//! topological order for the backward pass. A tape is single-use: calling
//! `backward` a second time is a state error.

use super::{broadcast_index, broadcast_shape, reduce_to_shape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Sigmoid(TensorId),
    Swish(TensorId),
    Elu(TensorId),
    Exp(TensorId),
    Softmax(TensorId, usize),
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    },
    Transpose(TensorId),
    MeanAxis0(TensorId),
    ConcatCols(Vec<TensorId>),
    SumAll(TensorId),
}

struct Node {
    tensor: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn value_scalar(&self, id: TensorId) -> f64 {
        self.nodes[id.0].tensor.data[0]
    }

    /// Insert an existing tensor as a leaf. Gradient tracking follows the
    /// tensor's `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor, Op::Leaf)
    }

    /// Leaf that never tracks gradients.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node { tensor, op });
        TensorId(self.nodes.len() - 1)
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        self.push(
            Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op,
        )
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tensor.requires_grad)
    }

    // ---- operations ------------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.tensor(a).dims2()?;
        let (k2, n) = self.tensor(b).dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.out(vec![m, n], data, rg, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn elementwise(
        &mut self,
        a: TensorId,
        b: TensorId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<TensorId> {
        let out_shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let numel: usize = out_shape.iter().product();
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        let mut data = Vec::with_capacity(numel);
        if ta.shape == tb.shape {
            for i in 0..numel {
                data.push(f(ta.data[i], tb.data[i]));
            }
        } else {
            for i in 0..numel {
                let va = ta.data[broadcast_index(&ta.shape, &out_shape, i)];
                let vb = tb.data[broadcast_index(&tb.shape, &out_shape, i)];
                data.push(f(va, vb));
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.out(out_shape, data, rg, op))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let t = &self.nodes[a.0].tensor;
        let data = t.data.iter().map(|v| v * c).collect();
        let shape = t.shape.clone();
        let rg = t.requires_grad;
        self.out(shape, data, rg, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// Swish(x) = x * sigmoid(x).
    pub fn swish(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Swish(a), |x| x * sigmoid(x))
    }

    /// ELU with alpha = 1: x for x >= 0, exp(x) - 1 otherwise.
    pub fn elu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Elu(a), elu)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    fn unary(&mut self, a: TensorId, op: Op, f: impl Fn(f64) -> f64) -> TensorId {
        let t = &self.nodes[a.0].tensor;
        let data = t.data.iter().map(|&v| f(v)).collect();
        let shape = t.shape.clone();
        let rg = t.requires_grad;
        self.out(shape, data, rg, op)
    }

    /// Softmax along `axis`, with max subtraction for stability.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let t = &self.nodes[a.0].tensor;
        if axis >= t.rank() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} out of range for shape {:?}",
                t.shape
            )));
        }
        let mut data = t.data.clone();
        for_each_lane(&t.shape, axis, |lane| {
            softmax_lane(&mut data, lane);
        });
        let shape = t.shape.clone();
        let rg = t.requires_grad;
        Ok(self.out(shape, data, rg, Op::Softmax(a, axis)))
    }

    /// Layer normalization over the last axis followed by a per-feature
    /// affine transform.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let t = &self.nodes[x.0].tensor;
        let d = *t.shape.last().ok_or_else(|| {
            Error::Dimension("layer_norm requires rank >= 1".to_string())
        })?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm gain/bias must have shape [{d}], got {:?} and {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let t = &self.nodes[x.0].tensor;
        let g = &self.nodes[gain.0].tensor.data;
        let b = &self.nodes[bias.0].tensor.data;
        let rows = t.numel() / d;
        let mut data = vec![0.0; t.numel()];
        for r in 0..rows {
            let xr = &t.data[r * d..(r + 1) * d];
            let (mean, var) = mean_var(xr);
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = g[j] * (xr[j] - mean) * inv + b[j];
            }
        }
        let shape = t.shape.clone();
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.out(shape, data, rg, Op::LayerNorm { x, gain, bias, eps }))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.tensor(a).dims2()?;
        let src = self.data(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.nodes[a.0].tensor.requires_grad;
        Ok(self.out(vec![n, m], data, rg, Op::Transpose(a)))
    }

    /// Mean over rows of a rank-2 tensor; result is [1, n].
    pub fn mean_axis0(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.tensor(a).dims2()?;
        let src = self.data(a);
        let mut data = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += src[i * n + j];
            }
        }
        for v in &mut data {
            *v /= m as f64;
        }
        let rg = self.nodes[a.0].tensor.requires_grad;
        Ok(self.out(vec![1, n], data, rg, Op::MeanAxis0(a)))
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols needs at least one part".into()));
        }
        let (m, _) = self.tensor(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.tensor(p).dims2()?;
            if mp != m {
                return Err(Error::Dimension(format!(
                    "concat_cols row counts disagree: {m} vs {mp}"
                )));
            }
            widths.push(np);
        }
        let n_total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n_total];
        let mut col = 0usize;
        for (idx, &p) in parts.iter().enumerate() {
            let np = widths[idx];
            let src = self.data(p);
            for i in 0..m {
                data[i * n_total + col..i * n_total + col + np]
                    .copy_from_slice(&src[i * np..(i + 1) * np]);
            }
            col += np;
        }
        let rg = self.any_grad(parts);
        Ok(self.out(vec![m, n_total], data, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Sum of all elements; result is a scalar [1].
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.data(a).iter().sum();
        let rg = self.nodes[a.0].tensor.requires_grad;
        self.out(vec![1], vec![s], rg, Op::SumAll(a))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar loss. Populates `grad` on every
    /// `requires_grad` tensor in the tape. Single use.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.consumed {
            return Err(Error::State(
                "backward already ran on this tape; build a fresh tape".into(),
            ));
        }
        if self.tensor(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = self
            .nodes
            .iter()
            .map(|node| {
                if node.tensor.requires_grad {
                    Some(vec![0.0; node.tensor.numel()])
                } else {
                    None
                }
            })
            .collect();
        if let Some(g) = grads[loss.0].as_mut() {
            g[0] = 1.0;
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads.into_iter()) {
            node.tensor.grad = g;
        }
        Ok(())
    }

    fn accumulate_parents(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.tensor;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ta = &self.nodes[a.0].tensor;
                let tb = &self.nodes[b.0].tensor;
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[1];
                if let Some(ga) = grads[a.0].as_mut() {
                    // dA = dC * B^T
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &tb.data[p * n..(p + 1) * n];
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                }
                if let Some(gb) = grads[b.0].as_mut() {
                    // dB = A^T * dC
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let brow = &mut gb[p * n..(p + 1) * n];
                            for j in 0..n {
                                brow[j] += av * grow[j];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate_broadcast(*a, g, &out.shape, grads, 1.0, None);
                self.accumulate_broadcast(*b, g, &out.shape, grads, 1.0, None);
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(*a, g, &out.shape, grads, 1.0, None);
                self.accumulate_broadcast(*b, g, &out.shape, grads, -1.0, None);
            }
            Op::Mul(a, b) => {
                self.accumulate_broadcast(*a, g, &out.shape, grads, 1.0, Some(*b));
                self.accumulate_broadcast(*b, g, &out.shape, grads, 1.0, Some(*a));
            }
            Op::Scale(a, c) => {
                if let Some(ga) = grads[a.0].as_mut() {
                    for (gv, &gg) in ga.iter_mut().zip(g.iter()) {
                        *gv += c * gg;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = grads[a.0].as_mut() {
                    for j in 0..g.len() {
                        let y = out.data[j];
                        ga[j] += g[j] * y * (1.0 - y);
                    }
                }
            }
            Op::Swish(a) => {
                if let Some(ga) = grads[a.0].as_mut() {
                    let xs = &self.nodes[a.0].tensor.data;
                    for j in 0..g.len() {
                        let s = sigmoid(xs[j]);
                        ga[j] += g[j] * (s + xs[j] * s * (1.0 - s));
                    }
                }
            }
            Op::Elu(a) => {
                if let Some(ga) = grads[a.0].as_mut() {
                    let xs = &self.nodes[a.0].tensor.data;
                    for j in 0..g.len() {
                        let d = if xs[j] >= 0.0 { 1.0 } else { out.data[j] + 1.0 };
                        ga[j] += g[j] * d;
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = grads[a.0].as_mut() {
                    for j in 0..g.len() {
                        ga[j] += g[j] * out.data[j];
                    }
                }
            }
            Op::Softmax(a, axis) => {
                if grads[a.0].is_none() {
                    return;
                }
                let mut gx = vec![0.0; g.len()];
                for_each_lane(&out.shape, *axis, |lane| {
                    let mut dot = 0.0;
                    for idx in lane.clone() {
                        dot += g[idx] * out.data[idx];
                    }
                    for idx in lane {
                        gx[idx] = out.data[idx] * (g[idx] - dot);
                    }
                });
                let ga = grads[a.0].as_mut().unwrap();
                for j in 0..gx.len() {
                    ga[j] += gx[j];
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let tx = &self.nodes[x.0].tensor;
                let tg = &self.nodes[gain.0].tensor;
                let d = *tx.shape.last().unwrap();
                let rows = tx.numel() / d;
                for r in 0..rows {
                    let xr = &tx.data[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let (mean, var) = mean_var(xr);
                    let inv = 1.0 / (var + eps).sqrt();
                    // dxhat_j = g_j * gain_j
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * inv;
                        let dxhat = gr[j] * tg.data[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    if let Some(gx) = grads[x.0].as_mut() {
                        let nd = d as f64;
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * inv;
                            let dxhat = gr[j] * tg.data[j];
                            gx[r * d + j] +=
                                inv * (dxhat - sum_dxhat / nd - xhat * sum_dxhat_xhat / nd);
                        }
                    }
                    if let Some(gg) = grads[gain.0].as_mut() {
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * inv;
                            gg[j] += gr[j] * xhat;
                        }
                    }
                    if let Some(gb) = grads[bias.0].as_mut() {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = grads[a.0].as_mut() {
                    let (n, m) = (out.shape[0], out.shape[1]);
                    for i in 0..n {
                        for j in 0..m {
                            ga[j * n + i] += g[i * m + j];
                        }
                    }
                }
            }
            Op::MeanAxis0(a) => {
                if let Some(ga) = grads[a.0].as_mut() {
                    let ta = &self.nodes[a.0].tensor;
                    let (m, n) = (ta.shape[0], ta.shape[1]);
                    let scale = 1.0 / m as f64;
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j] * scale;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = out.shape[0];
                let n_total = out.shape[1];
                let mut col = 0usize;
                for &p in parts {
                    let np = self.nodes[p.0].tensor.shape[1];
                    if let Some(gp) = grads[p.0].as_mut() {
                        for i in 0..m {
                            for j in 0..np {
                                gp[i * np + j] += g[i * n_total + col + j];
                            }
                        }
                    }
                    col += np;
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = grads[a.0].as_mut() {
                    for gv in ga.iter_mut() {
                        *gv += g[0];
                    }
                }
            }
        }
    }

    /// Accumulate `sign * g (⊙ other)` into the gradient of `target`,
    /// reducing over broadcast dimensions.
    fn accumulate_broadcast(
        &self,
        target: TensorId,
        g: &[f64],
        out_shape: &[usize],
        grads: &mut [Option<Vec<f64>>],
        sign: f64,
        other: Option<TensorId>,
    ) {
        if grads[target.0].is_none() {
            return;
        }
        let tshape = &self.nodes[target.0].tensor.shape;
        let contribution: Vec<f64> = match other {
            None => g.iter().map(|&v| sign * v).collect(),
            Some(o) => {
                let to = &self.nodes[o.0].tensor;
                if to.shape.as_slice() == out_shape {
                    g.iter()
                        .zip(to.data.iter())
                        .map(|(&gv, &ov)| sign * gv * ov)
                        .collect()
                } else {
                    (0..g.len())
                        .map(|i| sign * g[i] * to.data[broadcast_index(&to.shape, out_shape, i)])
                        .collect()
                }
            }
        };
        let reduced = reduce_to_shape(&contribution, out_shape, tshape);
        let gt = grads[target.0].as_mut().unwrap();
        for j in 0..reduced.len() {
            gt[j] += reduced[j];
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Visit every 1-D lane along `axis` of a tensor with the given shape.
/// The lane is passed as an iterator of flat indices.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(LaneIter)) {
    let rank = shape.len();
    let len = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let _ = rank;
    for o in 0..outer {
        for i in 0..inner {
            let start = o * len * stride.max(1) + i;
            f(LaneIter {
                next: start,
                left: len,
                stride: stride.max(1),
            });
        }
    }
}

#[derive(Clone)]
struct LaneIter {
    next: usize,
    left: usize,
    stride: usize,
}

impl Iterator for LaneIter {
    type Item = usize;
    fn next(&mut self) -> Option<usize> {
        if self.left == 0 {
            return None;
        }
        let v = self.next;
        self.next += self.stride;
        self.left -= 1;
        Some(v)
    }
}

fn softmax_lane(data: &mut [f64], lane: LaneIter) {
    let idx: Vec<usize> = lane.collect();
    let mut max = f64::NEG_INFINITY;
    for &i in &idx {
        if data[i] > max {
            max = data[i];
        }
    }
    let mut sum = 0.0;
    for &i in &idx {
        let e = (data[i] - max).exp();
        data[i] = e;
        sum += e;
    }
    for &i in &idx {
        data[i] /= sum;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}
