//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every op appends a node whose parents have smaller
//! indices, so creation order is a topological order. [`Value`] is a handle
//! into the tape. Tensors are rank 0, 1 or 2; broadcasting is limited to
//! adding a rank-1 bias over the last axis.

mod checkpoint;
mod gradcheck;
mod rng;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::grad_check;
pub use rng::{fnv1a, Rng, RngKey};

use rand::Rng as _;

use crate::error::{Error, Result};

/// Guard used by `log`, normalisations and probability clamps.
pub const EPS: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;

/// A dense row-major tensor with no graph attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Value(usize);

impl Value {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Value, Value),
    AddBias(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Scale(Value, f64),
    AddScalar(Value),
    MatMul(Value, Value),
    Transpose(Value),
    Concat { parts: Vec<Value>, axis: usize },
    Slice { src: Value, axis: usize, start: usize },
    Embedding { table: Value, ids: Vec<usize> },
    Softmax { src: Value, axis: usize },
    Log(Value),
    Sum(Value),
    Mean(Value),
    Relu(Value),
    Gelu(Value),
    Sigmoid(Value),
    LayerNorm { x: Value, gamma: Value, beta: Value, xhat: Vec<f64>, rstd: Vec<f64> },
    Dropout { src: Value, scale_mask: Vec<f64> },
    CrossEntropy { logits: Value, targets: Vec<usize>, probs: Vec<f64>, reduction: Reduction },
    Cosine { a: Value, b: Value, na: Vec<f64>, nb: Vec<f64> },
    L2Normalize { src: Value, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Tape of tensor operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    stochastic: bool,
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(op, shape, &[0, 0])),
    }
}

/// `c (+)= op(a) · op(b)` with `a` logically m×k and `b` logically k×n.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], accumulate: bool) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover the strided extents computed above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const K: f64 = 0.044_715;
    let u = C * (x + K * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * K * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Lane layout for reductions along `axis` of a rank-1/rank-2 shape:
/// (number of lanes, lane length, element stride, lane start fn).
fn lanes(shape: &[usize], axis: usize) -> Option<(usize, usize, usize, bool)> {
    match (shape.len(), axis) {
        (1, 0) => Some((1, shape[0], 1, true)),
        (2, 1) => Some((shape[0], shape[1], 1, true)),
        (2, 0) => Some((shape[1], shape[0], shape[1], false)),
        _ => None,
    }
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

    /// True once any op with run-to-run randomness (active dropout) was recorded.
    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Value {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            op,
            requires_grad,
        });
        Value(self.nodes.len() - 1)
    }

    fn node(&self, v: Value) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vs: &[Value]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, t: &Tensor) -> Value {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Value {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.node(v).shape
    }

    pub fn data(&self, v: Value) -> &[f64] {
        &self.node(v).data
    }

    pub fn value(&self, v: Value) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
        }
    }

    /// The single element of a one-element value.
    pub fn scalar(&self, v: Value) -> f64 {
        self.node(v).data[0]
    }

    pub fn grad(&self, v: Value) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    /// Gradient as a tensor, zeros if none was accumulated.
    pub fn grad_tensor(&self, v: Value) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.grad.clone().unwrap_or_else(|| vec![0.0; n.data.len()]),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise -------------------------------------------------

    /// Elementwise sum, or bias-add when `b` is rank 1 matching `a`'s last axis.
    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let rg = self.rg(&[a, b]);
        if sa == sb {
            let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
            return Ok(self.push(sa, data, Op::Add(a, b), rg));
        }
        if sb.len() == 1 && !sa.is_empty() && sa[sa.len() - 1] == sb[0] {
            let d = sb[0];
            let bias = self.data(b);
            let data = self
                .data(a)
                .iter()
                .enumerate()
                .map(|(i, x)| x + bias[i % d])
                .collect();
            return Ok(self.push(sa, data, Op::AddBias(a, b), rg));
        }
        Err(Error::shape("add", &sa, &sb))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::shape("sub", &sa, &sb));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(sa, data, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::shape("mul", &sa, &sb));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(sa, data, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Value, c: f64) -> Value {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Value, c: f64) -> Value {
        let data = self.data(a).iter().map(|x| x + c).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), data, Op::AddScalar(a), rg)
    }

    /// Natural log with inputs clamped below at [`EPS`].
    pub fn log(&mut self, a: Value) -> Value {
        let data = self.data(a).iter().map(|x| x.max(EPS).ln()).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), data, Op::Log(a), rg)
    }

    pub fn relu(&mut self, a: Value) -> Value {
        let data = self.data(a).iter().map(|x| x.max(0.0)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), data, Op::Relu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Value) -> Value {
        let data = self.data(a).iter().map(|&x| gelu(x).0).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), data, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Value) -> Value {
        let data = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), data, Op::Sigmoid(a), rg)
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, a: Value) -> Value {
        let s = self.data(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], Op::Sum(a), rg)
    }

    /// Mean over all elements; zero for an empty tensor.
    pub fn mean(&mut self, a: Value) -> Value {
        let d = self.data(a);
        let m = if d.is_empty() { 0.0 } else { d.iter().sum::<f64>() / d.len() as f64 };
        let rg = self.rg(&[a]);
        self.push(vec![], vec![m], Op::Mean(a), rg)
    }

    // ---- linear algebra and layout ----------------------------------

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Value) -> Result<Value> {
        let (m, n) = dims2("transpose", self.shape(a))?;
        let src = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    /// Concatenate rank-2 values along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Value], axis: usize) -> Result<Value> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of zero parts".into()))?;
        let (r0, c0) = dims2("concat", self.shape(first))?;
        let mut shapes = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2("concat", self.shape(p))?;
            let ok = match axis {
                0 => c == c0,
                1 => r == r0,
                _ => false,
            };
            if !ok {
                return Err(Error::shape("concat", self.shape(first), self.shape(p)));
            }
            shapes.push((r, c));
        }
        let (rows, cols) = if axis == 0 {
            (shapes.iter().map(|s| s.0).sum(), c0)
        } else {
            (r0, shapes.iter().map(|s| s.1).sum())
        };
        let mut out = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for &p in parts {
                out.extend_from_slice(self.data(p));
            }
        } else {
            for i in 0..rows {
                for (&p, &(_, c)) in parts.iter().zip(&shapes) {
                    out.extend_from_slice(&self.data(p)[i * c..(i + 1) * c]);
                }
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            vec![rows, cols],
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Rows (`axis` 0) or columns (`axis` 1) `start..end` of a rank-2 value.
    pub fn slice(&mut self, a: Value, axis: usize, start: usize, end: usize) -> Result<Value> {
        let (r, c) = dims2("slice", self.shape(a))?;
        let limit = if axis == 0 { r } else { c };
        if axis > 1 || start > end || end > limit {
            return Err(Error::shape("slice", self.shape(a), &[axis, start, end]));
        }
        let src = self.data(a);
        let (shape, out) = if axis == 0 {
            (vec![end - start, c], src[start * c..end * c].to_vec())
        } else {
            let w = end - start;
            let mut out = Vec::with_capacity(r * w);
            for i in 0..r {
                out.extend_from_slice(&src[i * c + start..i * c + end]);
            }
            (vec![r, w], out)
        };
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Slice { src: a, axis, start }, rg))
    }

    /// Gather rows of `table` (V×d) by id; also used to pick rows of hidden states.
    pub fn embedding_lookup(&mut self, table: Value, ids: &[usize]) -> Result<Value> {
        let (v, d) = dims2("embedding_lookup", self.shape(table))?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("embedding_lookup", &[v, d], &[bad]));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    // ---- normalisation and probabilities ----------------------------

    pub fn softmax(&mut self, a: Value, axis: usize) -> Result<Value> {
        let shape = self.shape(a).to_vec();
        let (count, len, stride, contiguous) =
            lanes(&shape, axis).ok_or_else(|| Error::shape("softmax", &shape, &[axis]))?;
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for lane in 0..count {
            let base = if contiguous { lane * len } else { lane };
            let idx = |t: usize| base + t * stride;
            let max = (0..len).map(|t| src[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for t in 0..len {
                let e = (src[idx(t)] - max).exp();
                out[idx(t)] = e;
                z += e;
            }
            for t in 0..len {
                out[idx(t)] /= z;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Softmax { src: a, axis }, rg))
    }

    /// Layer normalisation over the last axis of a rank-2 value.
    pub fn layer_norm(&mut self, x: Value, gamma: Value, beta: Value) -> Result<Value> {
        let (n, d) = dims2("layer_norm", self.shape(x))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (src, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let mut out = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mu) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            vec![n, d],
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Inverted dropout with a mask drawn from `key`. `p == 0` is the identity.
    pub fn dropout(&mut self, a: Value, p: f64, key: RngKey) -> Result<Value> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        self.stochastic = true;
        let mut rng = key.stream();
        let keep = 1.0 / (1.0 - p);
        let scale_mask: Vec<f64> = (0..self.data(a).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = self.data(a).iter().zip(&scale_mask).map(|(x, m)| x * m).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Dropout { src: a, scale_mask }, rg))
    }

    /// Cross-entropy of rank-2 logits against class ids, natural log.
    pub fn cross_entropy(&mut self, logits: Value, targets: &[usize], reduction: Reduction) -> Result<Value> {
        let (n, c) = dims2("cross_entropy", self.shape(logits))?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", &[n, c], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape("cross_entropy", &[n, c], &[bad]));
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for i in 0..n {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            total += lse - row[targets[i]];
        }
        if reduction == Reduction::Mean && n > 0 {
            total /= n as f64;
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![],
            vec![total],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                reduction,
            },
            rg,
        ))
    }

    /// Pairwise cosine similarity between the rows of `a` (n×d) and `b` (m×d).
    pub fn cosine_similarity(&mut self, a: Value, b: Value) -> Result<Value> {
        let (n, d) = dims2("cosine_similarity", self.shape(a))?;
        let (m, d2) = dims2("cosine_similarity", self.shape(b))?;
        if d != d2 {
            return Err(Error::shape("cosine_similarity", self.shape(a), self.shape(b)));
        }
        let row_norms = |x: &[f64], rows: usize| -> Vec<f64> {
            (0..rows)
                .map(|i| x[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS))
                .collect()
        };
        let (da, db) = (self.data(a), self.data(b));
        let na = row_norms(da, n);
        let nb = row_norms(db, m);
        let mut dots = vec![0.0; n * m];
        gemm(n, d, m, da, false, db, true, &mut dots, false);
        for i in 0..n {
            for j in 0..m {
                dots[i * m + j] /= na[i] * nb[j];
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![n, m], dots, Op::Cosine { a, b, na, nb }, rg))
    }

    /// Scale each row of a rank-2 value to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Value) -> Result<Value> {
        let (n, d) = dims2("l2_normalize", self.shape(a))?;
        let src = self.data(a);
        let mut norms = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS);
            norms[i] = nr;
            for j in 0..d {
                out[i * d + j] = row[j] / nr;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![n, d], out, Op::L2Normalize { src: a, norms }, rg))
    }

    // ---- backward ----------------------------------------------------

    /// Accumulates d(root)/d(node) into every reachable node's gradient.
    pub fn backward(&mut self, root: Value) -> Result<()> {
        if self.node(root).data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.node(root).shape
            )));
        }
        self.backward_seeded(&[(root, vec![1.0])])
    }

    /// Vector-Jacobian product: seeds the given nodes with upstream
    /// gradients and propagates. Each node is visited at most once per call;
    /// results are added to existing gradients.
    pub fn backward_seeded(&mut self, seeds: &[(Value, Vec<f64>)]) -> Result<()> {
        let Some(top) = seeds.iter().map(|(v, _)| v.0).max() else {
            return Ok(());
        };
        let mut pending: Vec<Option<Vec<f64>>> = (0..=top).map(|_| None).collect();
        for (v, g) in seeds {
            let n = self.node(*v);
            if g.len() != n.data.len() {
                return Err(Error::shape("backward seed", &n.shape, &[g.len()]));
            }
            if !n.requires_grad {
                continue;
            }
            let slot = pending[v.0].get_or_insert_with(|| vec![0.0; g.len()]);
            slot.iter_mut().zip(g).for_each(|(s, x)| *s += x);
        }
        for i in (0..=top).rev() {
            let Some(g) = pending[i].take() else { continue };
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            propagate(node, &g, before, &mut pending[..i]);
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }
}

/// Pending-gradient buffer for `v`, allocated on first use; `None` for constants.
fn slot<'a>(pending: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Value) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(pending[v.0].get_or_insert_with(|| vec![0.0; n.data.len()]))
}

fn propagate(node: &Node, g: &[f64], nodes: &[Node], pending: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(s) = slot(pending, nodes, v) {
                    s.iter_mut().zip(g).for_each(|(s, x)| *s += x);
                }
            }
        }
        Op::AddBias(a, b) => {
            if let Some(s) = slot(pending, nodes, *a) {
                s.iter_mut().zip(g).for_each(|(s, x)| *s += x);
            }
            if let Some(s) = slot(pending, nodes, *b) {
                let d = s.len();
                for (i, x) in g.iter().enumerate() {
                    s[i % d] += x;
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(s) = slot(pending, nodes, *a) {
                s.iter_mut().zip(g).for_each(|(s, x)| *s += x);
            }
            if let Some(s) = slot(pending, nodes, *b) {
                s.iter_mut().zip(g).for_each(|(s, x)| *s -= x);
            }
        }
        Op::Mul(a, b) => {
            let (da, db) = (&nodes[a.0].data, &nodes[b.0].data);
            if let Some(s) = slot(pending, nodes, *a) {
                for i in 0..g.len() {
                    s[i] += g[i] * db[i];
                }
            }
            if let Some(s) = slot(pending, nodes, *b) {
                for i in 0..g.len() {
                    s[i] += g[i] * da[i];
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(s) = slot(pending, nodes, *a) {
                s.iter_mut().zip(g).for_each(|(s, x)| *s += x * c);
            }
        }
        Op::AddScalar(a) => {
            if let Some(s) = slot(pending, nodes, *a) {
                s.iter_mut().zip(g).for_each(|(s, x)| *s += x);
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[1];
            // dA = G · Bᵀ, dB = Aᵀ · G
            if let Some(s) = slot(pending, nodes, *a) {
                gemm(m, n, k, g, false, &nodes[b.0].data, true, s, true);
            }
            if let Some(s) = slot(pending, nodes, *b) {
                gemm(k, m, n, &nodes[a.0].data, true, g, false, s, true);
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            if let Some(s) = slot(pending, nodes, *a) {
                for i in 0..m {
                    for j in 0..n {
                        s[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let cols = node.shape[1];
            let mut offset = 0;
            for &p in parts {
                let (r, c) = (nodes[p.0].shape[0], nodes[p.0].shape[1]);
                if let Some(s) = slot(pending, nodes, p) {
                    if *axis == 0 {
                        s.iter_mut().zip(&g[offset * cols..(offset + r) * cols]).for_each(|(s, x)| *s += x);
                    } else {
                        for i in 0..r {
                            for j in 0..c {
                                s[i * c + j] += g[i * cols + offset + j];
                            }
                        }
                    }
                }
                offset += if *axis == 0 { r } else { c };
            }
        }
        Op::Slice { src, axis, start } => {
            let c = nodes[src.0].shape[1];
            let (rows, w) = (node.shape[0], node.shape[1]);
            if let Some(s) = slot(pending, nodes, *src) {
                if *axis == 0 {
                    s[start * c..(start + rows) * c].iter_mut().zip(g).for_each(|(s, x)| *s += x);
                } else {
                    for i in 0..rows {
                        for j in 0..w {
                            s[i * c + start + j] += g[i * w + j];
                        }
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = nodes[table.0].shape[1];
            if let Some(s) = slot(pending, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        s[id * d + j] += g[r * d + j];
                    }
                }
            }
        }
        Op::Softmax { src, axis } => {
            let (count, len, stride, contiguous) = lanes(&node.shape, *axis).expect("validated in forward");
            let y = &node.data;
            if let Some(s) = slot(pending, nodes, *src) {
                for lane in 0..count {
                    let base = if contiguous { lane * len } else { lane };
                    let dot: f64 = (0..len).map(|t| g[base + t * stride] * y[base + t * stride]).sum();
                    for t in 0..len {
                        let i = base + t * stride;
                        s[i] += y[i] * (g[i] - dot);
                    }
                }
            }
        }
        Op::Log(a) => {
            let x = &nodes[a.0].data;
            if let Some(s) = slot(pending, nodes, *a) {
                for i in 0..g.len() {
                    if x[i] > EPS {
                        s[i] += g[i] / x[i];
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(s) = slot(pending, nodes, *a) {
                s.iter_mut().for_each(|s| *s += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(s) = slot(pending, nodes, *a) {
                let n = s.len() as f64;
                s.iter_mut().for_each(|s| *s += g[0] / n);
            }
        }
        Op::Relu(a) => {
            let x = &nodes[a.0].data;
            if let Some(s) = slot(pending, nodes, *a) {
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        s[i] += g[i];
                    }
                }
            }
        }
        Op::Gelu(a) => {
            let x = &nodes[a.0].data;
            if let Some(s) = slot(pending, nodes, *a) {
                for i in 0..g.len() {
                    s[i] += g[i] * gelu(x[i]).1;
                }
            }
        }
        Op::Sigmoid(a) => {
            let y = &node.data;
            if let Some(s) = slot(pending, nodes, *a) {
                for i in 0..g.len() {
                    s[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let (n, d) = (node.shape[0], node.shape[1]);
            let gam = &nodes[gamma.0].data;
            if let Some(s) = slot(pending, nodes, *gamma) {
                for i in 0..n * d {
                    s[i % d] += g[i] * xhat[i];
                }
            }
            if let Some(s) = slot(pending, nodes, *beta) {
                for i in 0..n * d {
                    s[i % d] += g[i];
                }
            }
            if let Some(s) = slot(pending, nodes, *x) {
                let mut dh = vec![0.0; d];
                for i in 0..n {
                    let row = i * d;
                    for j in 0..d {
                        dh[j] = g[row + j] * gam[j];
                    }
                    let sum_dh: f64 = dh.iter().sum();
                    let sum_dh_h: f64 = (0..d).map(|j| dh[j] * xhat[row + j]).sum();
                    let k = rstd[i] / d as f64;
                    for j in 0..d {
                        s[row + j] += k * (d as f64 * dh[j] - sum_dh - xhat[row + j] * sum_dh_h);
                    }
                }
            }
        }
        Op::Dropout { src, scale_mask } => {
            if let Some(s) = slot(pending, nodes, *src) {
                for i in 0..g.len() {
                    s[i] += g[i] * scale_mask[i];
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            reduction,
        } => {
            let c = nodes[logits.0].shape[1];
            let n = targets.len();
            let k = match reduction {
                Reduction::Sum => g[0],
                Reduction::Mean if n > 0 => g[0] / n as f64,
                Reduction::Mean => 0.0,
            };
            if let Some(s) = slot(pending, nodes, *logits) {
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        s[i * c + j] += k * (probs[i * c + j] - onehot);
                    }
                }
            }
        }
        Op::Cosine { a, b, na, nb } => {
            let (n, m) = (node.shape[0], node.shape[1]);
            let d = nodes[a.0].shape[1];
            let (da, db) = (&nodes[a.0].data, &nodes[b.0].data);
            let sim = &node.data;
            if let Some(s) = slot(pending, nodes, *a) {
                for i in 0..n {
                    for j in 0..m {
                        let gij = g[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let inv = 1.0 / (na[i] * nb[j]);
                        let self_term = sim[i * m + j] / (na[i] * na[i]);
                        for t in 0..d {
                            s[i * d + t] += gij * (db[j * d + t] * inv - self_term * da[i * d + t]);
                        }
                    }
                }
            }
            if let Some(s) = slot(pending, nodes, *b) {
                for i in 0..n {
                    for j in 0..m {
                        let gij = g[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let inv = 1.0 / (na[i] * nb[j]);
                        let self_term = sim[i * m + j] / (nb[j] * nb[j]);
                        for t in 0..d {
                            s[j * d + t] += gij * (da[i * d + t] * inv - self_term * db[j * d + t]);
                        }
                    }
                }
            }
        }
        Op::L2Normalize { src, norms } => {
            let (n, d) = (node.shape[0], node.shape[1]);
            let y = &node.data;
            if let Some(s) = slot(pending, nodes, *src) {
                for i in 0..n {
                    let row = i * d;
                    let dot: f64 = (0..d).map(|j| y[row + j] * g[row + j]).sum();
                    for j in 0..d {
                        s[row + j] += (g[row + j] - y[row + j] * dot) / norms[i];
                    }
                }
            }
        }
    }
}
