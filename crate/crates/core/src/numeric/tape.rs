//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its output value and enough
//! information to route gradients back to its inputs. [`Tape::backward`]
//! replays the nodes in reverse order of creation; because inputs always
//! precede their outputs on the tape, one reverse sweep visits every node
//! after all of its consumers.

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Clamp applied to probabilities inside [`Tape::bce_mean`].
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Gather { table: Var, ids: Vec<usize> },
    Conv1d { input: Var, kernels: Var, bias: Var },
    MaxKPool { input: Var, selected: Vec<usize> },
    Pointwise { input: Var, act: Activation },
    SegmentMean { input: Var, lengths: Vec<usize> },
    Affine { input: Var, weight: Var, bias: Var },
    PairAffine { text: Var, labels: Var, weight: Var, bias: Var },
    Bce { probs: Var, target: Vec<f64> },
    MeanOf(Vec<Var>),
    Sum(Var),
    Concat(Vec<Var>),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Records an input value. Gradients are tracked when the tensor has
    /// `requires_grad` set.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records an input value that never receives gradients.
    pub fn constant(&mut self, mut value: Tensor) -> Var {
        value.set_requires_grad(false);
        value.clear_grad();
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        let t = &mut self.nodes[v.0].value;
        let g = t.grad().map(<[f64]>::to_vec);
        t.clear_grad();
        g
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_derived(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad());
        value.set_requires_grad(tracked);
        self.push(value, op)
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let shape = self.value(v).shape();
        match shape {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::shape(format!("{what} must be a matrix, got shape {shape:?}"))),
        }
    }

    fn vector_len(&self, v: Var, what: &str) -> Result<usize> {
        let shape = self.value(v).shape();
        match shape {
            [n] => Ok(*n),
            _ => Err(Error::shape(format!("{what} must be a vector, got shape {shape:?}"))),
        }
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.matrix_dims(table, "embedding table")?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index { index: id, len: rows });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push_derived(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Valid cross-correlation of an `[s, d]` sequence with `[f, w, d]`
    /// kernels, giving `[s - w + 1, f]`.
    pub fn conv1d_valid(&mut self, input: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (s, d) = self.matrix_dims(input, "conv input")?;
        let (f, w, kd) = match self.value(kernels).shape() {
            [f, w, kd] => (*f, *w, *kd),
            other => return Err(Error::shape(format!("kernels must be [f, w, d], got {other:?}"))),
        };
        if kd != d {
            return Err(Error::shape(format!("kernel depth {kd} != input width {d}")));
        }
        if self.vector_len(bias, "conv bias")? != f {
            return Err(Error::shape("conv bias length must equal filter count"));
        }
        if s < w {
            return Err(Error::shape(format!(
                "sequence length {s} shorter than kernel width {w}"
            )));
        }
        let x = self.value(input).data();
        let k = self.value(kernels).data();
        let b = self.value(bias).data();
        let span = w * d;
        let out_len = s - w + 1;
        let mut out = vec![0.0; out_len * f];
        for t in 0..out_len {
            let window = &x[t * d..t * d + span];
            for j in 0..f {
                out[t * f + j] = b[j] + dot(window, &k[j * span..(j + 1) * span]);
            }
        }
        let value = Tensor::new(vec![out_len, f], out)?;
        Ok(self.push_derived(
            value,
            Op::Conv1d {
                input,
                kernels,
                bias,
            },
            &[input, kernels, bias],
        ))
    }

    /// Per column, the `k` largest values in descending order. Ties go to
    /// the lower row index.
    pub fn max_k_pool(&mut self, input: Var, k: usize) -> Result<Var> {
        let (n, f) = self.matrix_dims(input, "pool input")?;
        if k == 0 || n < k {
            return Err(Error::shape(format!("cannot take top {k} of {n} rows")));
        }
        let x = self.value(input).data();
        let mut out = vec![0.0; k * f];
        let mut selected = vec![0usize; k * f];
        let mut order: Vec<usize> = Vec::with_capacity(n);
        for c in 0..f {
            order.clear();
            order.extend(0..n);
            order.sort_by(|&a, &b| x[b * f + c].total_cmp(&x[a * f + c]).then(a.cmp(&b)));
            for (r, &row) in order.iter().take(k).enumerate() {
                out[r * f + c] = x[row * f + c];
                selected[r * f + c] = row * f + c;
            }
        }
        let value = Tensor::new(vec![k, f], out)?;
        Ok(self.push_derived(value, Op::MaxKPool { input, selected }, &[input]))
    }

    pub fn pointwise(&mut self, input: Var, act: Activation) -> Var {
        let src = self.value(input);
        let data = match act {
            Activation::Relu => src.data().iter().map(|&v| v.max(0.0)).collect(),
            Activation::Sigmoid => src.data().iter().map(|&v| sigmoid(v)).collect(),
        };
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push_derived(value, Op::Pointwise { input, act }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.pointwise(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.pointwise(input, Activation::Sigmoid)
    }

    /// Arithmetic mean over the rows of an `[n, d]` matrix.
    pub fn mean_rows(&mut self, input: Var) -> Result<Var> {
        let (n, _) = self.matrix_dims(input, "mean input")?;
        let seg = self.segment_mean(input, &[n])?;
        let d = self.value(seg).cols();
        self.reshape(seg, vec![d])
    }

    /// Row means over consecutive segments: output row `i` averages the
    /// next `lengths[i]` input rows.
    pub fn segment_mean(&mut self, input: Var, lengths: &[usize]) -> Result<Var> {
        let (n, d) = self.matrix_dims(input, "segment input")?;
        if lengths.iter().any(|&l| l == 0) {
            return Err(Error::shape("cannot average an empty row set"));
        }
        if lengths.iter().sum::<usize>() != n {
            return Err(Error::shape(format!(
                "segment lengths sum to {} but input has {n} rows",
                lengths.iter().sum::<usize>()
            )));
        }
        let x = self.value(input).data();
        let mut out = vec![0.0; lengths.len() * d];
        let mut row = 0;
        for (i, &len) in lengths.iter().enumerate() {
            let dst = &mut out[i * d..(i + 1) * d];
            for r in row..row + len {
                axpy(dst, 1.0, &x[r * d..(r + 1) * d]);
            }
            let inv = 1.0 / len as f64;
            dst.iter_mut().for_each(|v| *v *= inv);
            row += len;
        }
        let value = Tensor::new(vec![lengths.len(), d], out)?;
        Ok(self.push_derived(
            value,
            Op::SegmentMean {
                input,
                lengths: lengths.to_vec(),
            },
            &[input],
        ))
    }

    /// `input · weight + bias`, bias broadcast over rows. A vector input is
    /// treated as a single row and yields a vector.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, a, vector_in) = match self.value(input).shape() {
            [a] => (1, *a, true),
            [n, a] => (*n, *a, false),
            other => return Err(Error::shape(format!("affine input has shape {other:?}"))),
        };
        let (wa, b) = self.matrix_dims(weight, "affine weight")?;
        if wa != a {
            return Err(Error::shape(format!(
                "affine inner dimensions disagree: {a} vs {wa}"
            )));
        }
        if self.vector_len(bias, "affine bias")? != b {
            return Err(Error::shape("affine bias length must equal output width"));
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; n * b];
        for i in 0..n {
            let dst = &mut out[i * b..(i + 1) * b];
            dst.copy_from_slice(bv);
            for (k, &xv) in x[i * a..(i + 1) * a].iter().enumerate() {
                if xv != 0.0 {
                    axpy(dst, xv, &w[k * b..(k + 1) * b]);
                }
            }
        }
        let shape = if vector_in { vec![b] } else { vec![n, b] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push_derived(
            value,
            Op::Affine {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        ))
    }

    /// Affine layer over the rows `[text ⊕ labels[j]]` for every label row
    /// `j`, without materialising the repeated text matrix. `weight` is
    /// `[a_text + a_label, h]`; the output is `[c, h]`.
    pub fn pair_affine(&mut self, text: Var, labels: Var, weight: Var, bias: Var) -> Result<Var> {
        let at = self.vector_len(text, "text embedding")?;
        let (c, al) = self.matrix_dims(labels, "label embeddings")?;
        let (wa, h) = self.matrix_dims(weight, "pair weight")?;
        if wa != at + al {
            return Err(Error::shape(format!(
                "pair weight has {wa} input rows, concatenation is {}",
                at + al
            )));
        }
        if self.vector_len(bias, "pair bias")? != h {
            return Err(Error::shape("pair bias length must equal output width"));
        }
        let t = self.value(text).data();
        let l = self.value(labels).data();
        let w = self.value(weight).data();
        let mut base = self.value(bias).data().to_vec();
        for (k, &tv) in t.iter().enumerate() {
            axpy(&mut base, tv, &w[k * h..(k + 1) * h]);
        }
        let w_label = &w[at * h..];
        let mut out = vec![0.0; c * h];
        for j in 0..c {
            let dst = &mut out[j * h..(j + 1) * h];
            dst.copy_from_slice(&base);
            for (k, &lv) in l[j * al..(j + 1) * al].iter().enumerate() {
                axpy(dst, lv, &w_label[k * h..(k + 1) * h]);
            }
        }
        let value = Tensor::new(vec![c, h], out)?;
        Ok(self.push_derived(
            value,
            Op::PairAffine {
                text,
                labels,
                weight,
                bias,
            },
            &[text, labels, weight, bias],
        ))
    }

    /// Mean binary cross entropy between `probs` and a 0/1 `target`.
    /// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce_mean(&mut self, probs: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(probs).data();
        if p.len() != target.len() {
            return Err(Error::shape(format!(
                "{} probabilities vs {} targets",
                p.len(),
                target.len()
            )));
        }
        if p.is_empty() {
            return Err(Error::shape("binary cross entropy over zero labels"));
        }
        let sum: f64 = p
            .iter()
            .zip(target)
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        let value = Tensor::scalar(sum / p.len() as f64);
        Ok(self.push_derived(
            value,
            Op::Bce {
                probs,
                target: target.to_vec(),
            },
            &[probs],
        ))
    }

    /// Mean of scalar values.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("mean of zero values"));
        }
        let mut total = 0.0;
        for &v in parts {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::shape("mean_of expects scalar inputs"));
            }
            total += t.item();
        }
        let value = Tensor::scalar(total / parts.len() as f64);
        Ok(self.push_derived(value, Op::MeanOf(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).data().iter().sum());
        self.push_derived(value, Op::Sum(input), &[input])
    }

    /// Flattens and concatenates the inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        for &v in parts {
            data.extend_from_slice(self.value(v).data());
        }
        let value = Tensor::vector(data);
        self.push_derived(value, Op::Concat(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = Tensor::new(shape, self.value(input).data().to_vec())?;
        Ok(self.push_derived(value, Op::Reshape(input), &[input]))
    }

    /// Propagates gradients from the scalar `loss` to every node that
    /// requires them. Tracked leaves that the loss does not reach end up
    /// with an all-zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        if !self.value(loss).requires_grad() {
            self.zero_leaf_grads();
            return Ok(());
        }
        self.nodes[loss.0].value.set_grad(vec![1.0])?;

        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.value.grad() else { continue };
            backprop(before, node, g)?;
        }
        self.zero_leaf_grads();
        Ok(())
    }

    fn zero_leaf_grads(&mut self) {
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                node.value.grad_or_zeros();
            }
        }
    }
}

fn backprop(nodes: &mut [Node], node: &Node, g: &[f64]) -> Result<()> {
    match &node.op {
        Op::Leaf => {}
        Op::Gather { table, ids } => {
            if tracked(nodes, *table) {
                let d = node.value.cols();
                let tg = nodes[table.0].value.grad_or_zeros();
                for (i, &id) in ids.iter().enumerate() {
                    axpy(&mut tg[id * d..(id + 1) * d], 1.0, &g[i * d..(i + 1) * d]);
                }
            }
        }
        Op::Conv1d {
            input,
            kernels,
            bias,
        } => {
            let x = nodes[input.0].value.data();
            let k = nodes[kernels.0].value.data();
            let (s, d) = (nodes[input.0].value.rows(), nodes[input.0].value.cols());
            let (f, w) = {
                let sh = nodes[kernels.0].value.shape();
                (sh[0], sh[1])
            };
            let span = w * d;
            let out_len = s - w + 1;
            let mut dx = vec![0.0; x.len()];
            let mut dk = vec![0.0; k.len()];
            let mut db = vec![0.0; f];
            for t in 0..out_len {
                let window = &x[t * d..t * d + span];
                for j in 0..f {
                    let gv = g[t * f + j];
                    if gv == 0.0 {
                        continue;
                    }
                    db[j] += gv;
                    axpy(&mut dk[j * span..(j + 1) * span], gv, window);
                    axpy(&mut dx[t * d..t * d + span], gv, &k[j * span..(j + 1) * span]);
                }
            }
            accumulate(nodes, *input, &dx);
            accumulate(nodes, *kernels, &dk);
            accumulate(nodes, *bias, &db);
        }
        Op::MaxKPool { input, selected } => {
            if tracked(nodes, *input) {
                let ig = nodes[input.0].value.grad_or_zeros();
                for (&src, &gv) in selected.iter().zip(g) {
                    ig[src] += gv;
                }
            }
        }
        Op::Pointwise { input, act } => {
            if tracked(nodes, *input) {
                let y = node.value.data();
                let dx: Vec<f64> = match act {
                    Activation::Relu => {
                        y.iter().zip(g).map(|(&y, &g)| if y > 0.0 { g } else { 0.0 }).collect()
                    }
                    Activation::Sigmoid => {
                        y.iter().zip(g).map(|(&y, &g)| g * y * (1.0 - y)).collect()
                    }
                };
                accumulate(nodes, *input, &dx);
            }
        }
        Op::SegmentMean { input, lengths } => {
            if tracked(nodes, *input) {
                let d = node.value.cols();
                let ig = nodes[input.0].value.grad_or_zeros();
                let mut row = 0;
                for (i, &len) in lengths.iter().enumerate() {
                    let inv = 1.0 / len as f64;
                    for r in row..row + len {
                        axpy(&mut ig[r * d..(r + 1) * d], inv, &g[i * d..(i + 1) * d]);
                    }
                    row += len;
                }
            }
        }
        Op::Affine {
            input,
            weight,
            bias,
        } => {
            let x = nodes[input.0].value.data();
            let w = nodes[weight.0].value.data();
            let (a, b) = (nodes[weight.0].value.rows(), nodes[weight.0].value.cols());
            let n = x.len() / a;
            let mut dx = vec![0.0; x.len()];
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; b];
            for i in 0..n {
                let gi = &g[i * b..(i + 1) * b];
                axpy(&mut db, 1.0, gi);
                for k in 0..a {
                    let wk = &w[k * b..(k + 1) * b];
                    dx[i * a + k] = dot(gi, wk);
                    let xv = x[i * a + k];
                    if xv != 0.0 {
                        axpy(&mut dw[k * b..(k + 1) * b], xv, gi);
                    }
                }
            }
            accumulate(nodes, *input, &dx);
            accumulate(nodes, *weight, &dw);
            accumulate(nodes, *bias, &db);
        }
        Op::PairAffine {
            text,
            labels,
            weight,
            bias,
        } => {
            let t = nodes[text.0].value.data();
            let l = nodes[labels.0].value.data();
            let w = nodes[weight.0].value.data();
            let h = nodes[weight.0].value.cols();
            let at = t.len();
            let (c, al) = (nodes[labels.0].value.rows(), nodes[labels.0].value.cols());
            let mut gsum = vec![0.0; h];
            for j in 0..c {
                axpy(&mut gsum, 1.0, &g[j * h..(j + 1) * h]);
            }
            let mut dt = vec![0.0; at];
            let mut dl = vec![0.0; l.len()];
            let mut dw = vec![0.0; w.len()];
            for k in 0..at {
                dt[k] = dot(&gsum, &w[k * h..(k + 1) * h]);
                axpy(&mut dw[k * h..(k + 1) * h], t[k], &gsum);
            }
            let w_label = &w[at * h..];
            let (_, dw_label) = dw.split_at_mut(at * h);
            for j in 0..c {
                let gj = &g[j * h..(j + 1) * h];
                for k in 0..al {
                    dl[j * al + k] = dot(gj, &w_label[k * h..(k + 1) * h]);
                    let lv = l[j * al + k];
                    if lv != 0.0 {
                        axpy(&mut dw_label[k * h..(k + 1) * h], lv, gj);
                    }
                }
            }
            accumulate(nodes, *text, &dt);
            accumulate(nodes, *labels, &dl);
            accumulate(nodes, *weight, &dw);
            accumulate(nodes, *bias, &gsum);
        }
        Op::Bce { probs, target } => {
            if tracked(nodes, *probs) {
                let p = nodes[probs.0].value.data();
                let c = p.len() as f64;
                let dp: Vec<f64> = p
                    .iter()
                    .zip(target)
                    .map(|(&p, &y)| {
                        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        g[0] * (p - y) / (c * p * (1.0 - p))
                    })
                    .collect();
                accumulate(nodes, *probs, &dp);
            }
        }
        Op::MeanOf(parts) => {
            let share = g[0] / parts.len() as f64;
            for &v in parts {
                accumulate(nodes, v, &[share]);
            }
        }
        Op::Sum(input) => {
            if tracked(nodes, *input) {
                let ig = nodes[input.0].value.grad_or_zeros();
                ig.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &v in parts {
                let n = nodes[v.0].value.len();
                accumulate(nodes, v, &g[offset..offset + n]);
                offset += n;
            }
        }
        Op::Reshape(input) => accumulate(nodes, *input, g),
    }
    Ok(())
}

fn tracked(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].value.requires_grad()
}

fn accumulate(nodes: &mut [Node], v: Var, delta: &[f64]) {
    let t = &mut nodes[v.0].value;
    if t.requires_grad() {
        axpy(t.grad_or_zeros(), 1.0, delta);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn gather_selects_rows() {
        let mut tape = Tape::new();
        let table = tape.leaf(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let out = tape.embedding_gather(table, &[1, 0, 1]).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        let empty = tape.embedding_gather(table, &[]).unwrap();
        assert_eq!(tape.value(empty).shape(), &[0, 2]);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::zeros(vec![2, 2]));
        let err = tape.embedding_gather(table, &[0, 5]).unwrap_err();
        assert!(matches!(err, Error::Index { index: 5, len: 2 }));
    }

    #[test]
    fn gather_backward_accumulates_repeats() {
        let mut tape = Tape::new();
        let table = tape.leaf(mat(&[&[1.0, 2.0], &[3.0, 4.0]]).with_grad());
        let out = tape.embedding_gather(table, &[1, 1]).unwrap();
        let loss = tape.sum(out);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn conv_difference_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(mat(&[&[1.0], &[2.0], &[3.0], &[4.0]]));
        let k = tape.leaf(Tensor::new(vec![1, 2, 1], vec![1.0, -1.0]).unwrap());
        let b = tape.leaf(Tensor::vector(vec![0.0]));
        let out = tape.conv1d_valid(x, k, b).unwrap();
        assert_eq!(tape.value(out).shape(), &[3, 1]);
        assert_eq!(tape.value(out).data(), &[-1.0, -1.0, -1.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(mat(&[&[0.5], &[-2.0], &[7.0]]));
        let k = tape.leaf(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        let b = tape.leaf(Tensor::vector(vec![0.0]));
        let out = tape.conv1d_valid(x, k, b).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(x).data());
    }

    #[test]
    fn conv_too_short_is_shape_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 1]));
        let k = tape.leaf(Tensor::zeros(vec![1, 3, 1]));
        let b = tape.leaf(Tensor::zeros(vec![1]));
        assert!(matches!(tape.conv1d_valid(x, k, b), Err(Error::Shape(_))));
    }

    #[test]
    fn max_k_pool_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(mat(&[&[1.0], &[3.0], &[2.0], &[5.0]]));
        let top2 = tape.max_k_pool(x, 2).unwrap();
        assert_eq!(tape.value(top2).data(), &[5.0, 3.0]);
        let top1 = tape.max_k_pool(x, 1).unwrap();
        assert_eq!(tape.value(top1).data(), &[5.0]);
        assert!(tape.max_k_pool(x, 5).is_err());
    }

    #[test]
    fn max_k_pool_ties_route_to_lowest_index() {
        let mut tape = Tape::new();
        let x = tape.leaf(mat(&[&[2.0], &[2.0], &[1.0]]).with_grad());
        let out = tape.max_k_pool(x, 2).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 2.0]);
        let loss = tape.sum(out);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 0.0]);
    }

    #[test]
    fn pointwise_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let z = tape.leaf(Tensor::vector(vec![0.0]).with_grad());
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data(), &[0.5]);
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(z).unwrap(), &[0.25]);
    }

    #[test]
    fn mean_rows_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let m = tape.mean_rows(x).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0, 3.0]);
        assert_eq!(tape.value(m).shape(), &[2]);

        let one = tape.leaf(mat(&[&[7.0, -1.0]]));
        let m = tape.mean_rows(one).unwrap();
        assert_eq!(tape.value(m).data(), &[7.0, -1.0]);

        let empty = tape.leaf(Tensor::zeros(vec![0, 3]));
        assert!(matches!(tape.mean_rows(empty), Err(Error::Shape(_))));
    }

    #[test]
    fn mean_rows_backward_splits_evenly() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![4, 2]).with_grad());
        let m = tape.mean_rows(x).unwrap();
        let loss = tape.sum(m);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.25));
    }

    #[test]
    fn affine_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let eye = tape.leaf(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let zero = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let out = tape.affine(x, eye, zero).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(x).data());

        let a = tape.leaf(mat(&[&[2.0]]));
        let w = tape.leaf(mat(&[&[3.0]]));
        let b = tape.leaf(Tensor::vector(vec![1.0]));
        let out = tape.affine(a, w, b).unwrap();
        assert_eq!(tape.value(out).data(), &[7.0]);

        let bad = tape.leaf(Tensor::zeros(vec![3, 1]));
        assert!(matches!(tape.affine(x, bad, b), Err(Error::Shape(_))));
    }

    #[test]
    fn bce_examples() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![0.5, 0.5]));
        let l = tape.bce_mean(p, &[1.0, 0.0]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let p = tape.leaf(Tensor::vector(vec![0.9]));
        let l = tape.bce_mean(p, &[1.0]).unwrap();
        assert!((tape.value(l).item() + 0.9f64.ln()).abs() < 1e-12);

        let p = tape.leaf(Tensor::vector(vec![1.0, 0.0]));
        let l = tape.bce_mean(p, &[1.0, 0.0]).unwrap();
        let v = tape.value(l).item();
        assert!(v >= 0.0 && v <= -(1.0 - BCE_EPS).ln() + 1e-15);

        assert!(matches!(tape.bce_mean(p, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_sum_and_unreached() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]).with_grad());
        let unused = tape.leaf(Tensor::vector(vec![4.0, 5.0]).with_grad());
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn reused_value_accumulates() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![2.0]).with_grad());
        let a = tape.sum(w);
        let b = tape.sum(w);
        let loss = tape.mean_of(&[a, b]).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0]);
    }

    #[test]
    fn pair_affine_matches_explicit_concatenation() {
        let mut tape = Tape::new();
        let t = tape.leaf(Tensor::vector(vec![1.0, -1.0]));
        let l = tape.leaf(mat(&[&[0.5, 2.0], &[3.0, 0.0], &[-1.0, 1.0]]));
        let w = tape.leaf(mat(&[&[1.0, 2.0], &[0.5, -1.0], &[2.0, 0.0], &[-3.0, 1.0]]));
        let b = tape.leaf(Tensor::vector(vec![0.1, 0.2]));
        let fused = tape.pair_affine(t, l, w, b).unwrap();

        let rows: Vec<Vec<f64>> = (0..3)
            .map(|j| {
                let mut r = tape.value(t).data().to_vec();
                r.extend_from_slice(tape.value(l).row(j));
                r
            })
            .collect();
        let x = tape.leaf(Tensor::from_rows(&rows).unwrap());
        let explicit = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(fused).data(), tape.value(explicit).data());
    }
}
