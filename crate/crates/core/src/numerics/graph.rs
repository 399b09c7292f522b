//! Recorded computation graph with reverse-mode gradients.
//!
//! Every op appends a node holding its output value; [`Graph::backward`]
//! walks the nodes in reverse. The op set covers exactly what the encoder,
//! denoiser and regression head need.

use std::collections::{BTreeMap, HashMap};

use super::params::ParameterStore;
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::{Error, Result};

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Slope inside the sigmoid of the smooth GELU approximation.
const GELU_SLOPE: f64 = 1.702;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize, end: usize },
    Reshape(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gelu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Gradients of a scalar with respect to every parameter node of a graph.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.by_name.keys()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.by_name.insert(name, grad);
    }

    /// Adds zero gradients for trainable parameters of `store` that did not
    /// take part in the graph.
    pub fn complete_for(mut self, store: &ParameterStore) -> Self {
        for name in store.trainable_names() {
            if !self.by_name.contains_key(name) {
                let shape = store.get(name).map(|t| t.shape().to_vec()).unwrap_or_default();
                self.by_name.insert(name.clone(), Tensor::zeros(&shape));
            }
        }
        self
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Reads a parameter from the store. Repeated requests for the same name
    /// return the same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?
            .clone();
        self.nodes.push(Node {
            value,
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// `x[..., k] · w[k, n] -> [..., n]`
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = matmul(self.value(x), self.value(w))?;
        self.push(out, Op::MatMul(x, w), "matmul")
    }

    /// Batched product over shared leading axes: `[.., m, k] · [.., k, n]`,
    /// or `[.., m, k] · [.., n, k]^T` when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (batch, m, k, n) = bmm_dims(ta, tb, transpose_b)?;
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let ablk = &ta.data()[i * m * k..(i + 1) * m * k];
            let bblk = &tb.data()[i * k * n..(i + 1) * k * n];
            let oblk = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                gemm_nt(ablk, bblk, oblk, m, k, n);
            } else {
                gemm_nn(ablk, bblk, oblk, m, k, n);
            }
        }
        let mut shape = ta.shape()[..ta.shape().len() - 2].to_vec();
        shape.extend([m, n]);
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::BatchMatMul { a, b, transpose_b }, "bmm")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = zip_same(self.value(a), self.value(b), "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = zip_same(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = zip_same(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// Adds `b` to every trailing block of `a`; `b.shape` must be a suffix
    /// of `a.shape` (bias rows, position embeddings).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast(self.value(a), self.value(b), "add_broadcast", |x, y| x + y)?;
        self.push(out, Op::AddBroadcast(a, b), "add_broadcast")
    }

    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast(self.value(a), self.value(b), "mul_broadcast", |x, y| x * y)?;
        self.push(out, Op::MulBroadcast(a, b), "mul_broadcast")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), "scale")
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let out = concat_last(&parts.iter().map(|&p| self.value(p)).collect::<Vec<_>>())?;
        self.push(out, Op::Concat(parts.to_vec()), "concat")
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let width = t.last_dim();
        if start >= end || end > width {
            return Err(Error::invalid(format!("slice {start}..{end} of last axis {width}")));
        }
        let cols = end - start;
        let mut data = Vec::with_capacity(t.rows() * cols);
        for row in t.data().chunks(width) {
            data.extend_from_slice(&row[start..end]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = cols;
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Slice { x, start, end }, "slice")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = softmax(self.value(x));
        self.push(out, Op::Softmax(x), "softmax")
    }

    /// Normalizes each row of the last axis to zero mean, unit variance.
    /// Gain and bias are applied separately with the broadcast ops.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (out, inv_std) = layer_norm_with_stats(self.value(x));
        self.push(out, Op::LayerNorm { x, inv_std }, "layer_norm")
    }

    /// `x * sigmoid(1.702 x)`
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * sigmoid(GELU_SLOPE * v));
        self.push(out, Op::Gelu(x), "gelu")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x), "square")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Gradients of the scalar `loss` with respect to every parameter node.
    /// Parameters that do not influence `loss` get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(dout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param => {
                    // Parameters are read back below; keep the gradient.
                    grads[idx] = Some(dout);
                }
                Op::MatMul(x, w) => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let (rows, k, n) = (tx.rows(), tw.shape()[0], tw.shape()[1]);
                    let mut dx = Tensor::zeros(tx.shape());
                    gemm_nt(dout.data(), tw.data(), dx.data_mut(), rows, n, k);
                    let mut dw = Tensor::zeros(tw.shape());
                    gemm_tn(tx.data(), dout.data(), dw.data_mut(), rows, k, n);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::BatchMatMul { a, b, transpose_b } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (batch, m, k, n) = bmm_dims(ta, tb, *transpose_b)?;
                    let mut da = Tensor::zeros(ta.shape());
                    let mut db = Tensor::zeros(tb.shape());
                    for i in 0..batch {
                        let ablk = &ta.data()[i * m * k..(i + 1) * m * k];
                        let bblk = &tb.data()[i * k * n..(i + 1) * k * n];
                        let dblk = &dout.data()[i * m * n..(i + 1) * m * n];
                        let da_blk = &mut da.data_mut()[i * m * k..(i + 1) * m * k];
                        if *transpose_b {
                            gemm_nn(dblk, bblk, da_blk, m, n, k);
                        } else {
                            gemm_nt(dblk, bblk, da_blk, m, n, k);
                        }
                        let db_blk = &mut db.data_mut()[i * k * n..(i + 1) * k * n];
                        if *transpose_b {
                            gemm_tn(dblk, ablk, db_blk, m, n, k);
                        } else {
                            gemm_tn(ablk, dblk, db_blk, m, k, n);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, dout.clone());
                    accumulate(&mut grads, *a, dout);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, dout.map(|v| -v));
                    accumulate(&mut grads, *a, dout);
                }
                Op::Mul(a, b) => {
                    let da = zip_same(&dout, self.value(*b), "mul", |g, y| g * y)?;
                    let db = zip_same(&dout, self.value(*a), "mul", |g, x| g * x)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddBroadcast(a, b) => {
                    let tb = self.value(*b);
                    let mut db = Tensor::zeros(tb.shape());
                    for block in dout.data().chunks(tb.len()) {
                        for (d, g) in db.data_mut().iter_mut().zip(block) {
                            *d += g;
                        }
                    }
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *a, dout);
                }
                Op::MulBroadcast(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let mut db = Tensor::zeros(tb.shape());
                    let mut da = Tensor::zeros(ta.shape());
                    let blk = tb.len();
                    for (j, (gblock, ablock)) in dout.data().chunks(blk).zip(ta.data().chunks(blk)).enumerate() {
                        for i in 0..blk {
                            db.data_mut()[i] += gblock[i] * ablock[i];
                            da.data_mut()[j * blk + i] = gblock[i] * tb.data()[i];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(x, f) => accumulate(&mut grads, *x, dout.map(|v| v * f)),
                Op::Concat(parts) => {
                    let total = dout.last_dim();
                    let mut offset = 0;
                    for &p in parts {
                        let tp = self.value(p);
                        let w = tp.last_dim();
                        let mut dp = Vec::with_capacity(tp.len());
                        for row in dout.data().chunks(total) {
                            dp.extend_from_slice(&row[offset..offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, p, Tensor::new(tp.shape().to_vec(), dp)?);
                    }
                }
                Op::Slice { x, start, end } => {
                    let tx = self.value(*x);
                    let width = tx.last_dim();
                    let cols = end - start;
                    let mut dx = Tensor::zeros(tx.shape());
                    for (row, g) in dx.data_mut().chunks_mut(width).zip(dout.data().chunks(cols)) {
                        row[*start..*end].copy_from_slice(g);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, dout.reshape(&shape)?);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let w = y.last_dim();
                    let mut dx = Tensor::zeros(y.shape());
                    for ((dxr, yr), gr) in dx
                        .data_mut()
                        .chunks_mut(w)
                        .zip(y.data().chunks(w))
                        .zip(dout.data().chunks(w))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for i in 0..w {
                            dxr[i] = yr[i] * (gr[i] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = &node.value;
                    let w = y.last_dim();
                    let nf = w as f64;
                    let mut dx = Tensor::zeros(y.shape());
                    for (r, ((dxr, yr), gr)) in dx
                        .data_mut()
                        .chunks_mut(w)
                        .zip(y.data().chunks(w))
                        .zip(dout.data().chunks(w))
                        .enumerate()
                    {
                        let sum_g: f64 = gr.iter().sum();
                        let sum_gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for i in 0..w {
                            dxr[i] = inv_std[r] / nf * (nf * gr[i] - sum_g - yr[i] * sum_gy);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gelu(x) => {
                    let tx = self.value(*x);
                    let dx = zip_same(&dout, tx, "gelu", |g, v| {
                        let s = sigmoid(GELU_SLOPE * v);
                        g * (s + GELU_SLOPE * v * s * (1.0 - s))
                    })?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Square(x) => {
                    let dx = zip_same(&dout, self.value(*x), "square", |g, v| 2.0 * g * v)?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sum(x) => {
                    let g = dout.data()[0];
                    accumulate(&mut grads, *x, Tensor::full(self.value(*x).shape(), g));
                }
                Op::Mean(x) => {
                    let tx = self.value(*x);
                    let g = dout.data()[0] / tx.len() as f64;
                    accumulate(&mut grads, *x, Tensor::full(tx.shape(), g));
                }
            }
        }

        let mut out = Gradients::default();
        for (name, &v) in &self.params {
            let grad = match grads.get(v.0).and_then(|g| g.as_ref()) {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.value(v).shape()),
            };
            out.by_name.insert(name.clone(), grad);
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn bmm_dims(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<(usize, usize, usize, usize)> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 3 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
        return Err(shape_err("bmm", a, b));
    }
    let r = sa.len();
    let (m, k) = (sa[r - 2], sa[r - 1]);
    let (kb, n) = if transpose_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
    if k != kb {
        return Err(shape_err("bmm", a, b));
    }
    let batch = sa[..r - 2].iter().product();
    Ok((batch, m, k, n))
}

fn zip_same(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, a, b));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn broadcast(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb || b.is_empty() {
        return Err(shape_err(op, a, b));
    }
    let data = a
        .data()
        .chunks(b.len())
        .flat_map(|block| block.iter().zip(b.data()).map(|(&x, &y)| f(x, y)))
        .collect();
    Tensor::new(sa.to_vec(), data)
}

/// `x[..., k] · w[k, n]`
pub fn matmul(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    if w.shape().len() != 2 || x.shape().is_empty() || x.last_dim() != w.shape()[0] {
        return Err(shape_err("matmul", x, w));
    }
    let (rows, k, n) = (x.rows(), w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; rows * n];
    gemm_nn(x.data(), w.data(), &mut out, rows, k, n);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::new(shape, out)
}

pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
    let lead = &first.shape()[..first.shape().len().saturating_sub(1)];
    for p in parts {
        if p.shape().is_empty() || &p.shape()[..p.shape().len() - 1] != lead {
            return Err(shape_err("concat", first, p));
        }
    }
    let total: usize = parts.iter().map(|p| p.last_dim()).sum();
    let rows = first.rows();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            let w = p.last_dim();
            data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Tensor::new(shape, data)
}

/// Row-wise softmax over the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let w = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(w) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub fn layer_norm(x: &Tensor) -> Tensor {
    layer_norm_with_stats(x).0
}

fn layer_norm_with_stats(x: &Tensor) -> (Tensor, Vec<f64>) {
    let w = x.last_dim();
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for row in out.data_mut().chunks_mut(w) {
        let mean = row.iter().sum::<f64>() / w as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv_std;
        }
        inv.push(inv_std);
    }
    (out, inv)
}

/// Sinusoidal embedding of a scalar position: interleaved
/// `[sin(t f_0), cos(t f_0), sin(t f_1), ...]` with `f_i = 10000^(-2i/dim)`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let i = j / 2;
            let freq = 10000f64.powf(-2.0 * i as f64 / dim as f64);
            if j % 2 == 0 {
                (t * freq).sin()
            } else {
                (t * freq).cos()
            }
        })
        .collect()
}
