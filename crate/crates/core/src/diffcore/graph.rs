//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value and whatever the
//! backward rule needs. `backward` walks the tape once in reverse insertion
//! order; leaf gradients accumulate across calls until zeroed.

use std::collections::BTreeMap;

use crate::diffcore::params::ParamStore;
use crate::diffcore::rng::Rng;
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Train mode enables dropout and batch statistics; eval mode is deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics for batch normalization over the leading axis.
///
/// The `t`-th update uses weight `max(momentum, 1/t)`: a plain average of
/// the first `1/momentum` batches, an exponential average afterwards. The
/// initial `0`/`1` values are therefore never mixed into the estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub updates: u64,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        RunningStats {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            updates: 0,
        }
    }

    fn update(&mut self, mean: &[f64], var: &[f64], momentum: f64) {
        self.updates += 1;
        let w = momentum.max(1.0 / self.updates as f64);
        for j in 0..mean.len() {
            self.mean[j] = (1.0 - w) * self.mean[j] + w * mean[j];
            self.var[j] = (1.0 - w) * self.var[j] + w * var[j];
        }
    }
}

/// Elementwise derivative supplied with a custom [`Graph::map`] node.
pub type ElementwiseFn = fn(f64) -> f64;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var, bias: bool },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var },
    Transpose { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    GatherRows { a: Var, rows: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    Embedding { table: Var, ids: Vec<usize> },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { a: Var },
    Relu { a: Var },
    Softplus { a: Var },
    Dropout { a: Var, mask: Vec<f64> },
    Log { a: Var },
    Exp { a: Var },
    Square { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    SumLast { a: Var, width: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    BatchNormTrain { a: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { a: Var, inv_std: Vec<f64> },
    Map { a: Var, deriv: ElementwiseFn },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: BTreeMap<String, Var>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericOverflow { op })
    }
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn mm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
fn mm_bt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in g_row.iter().zip(b_row) {
                acc += gv * bv;
            }
            out[i * k + p] += acc;
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
fn mm_at(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Permutes axes: `out.shape[i] = shape[perm[i]]`.
fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let offset: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn row_split(shape: &[usize]) -> (usize, usize) {
    match shape.split_first() {
        Some((&rows, rest)) => (rows, rest.iter().product()),
        None => (1, 1),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.nodes[v.0].value.item()
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Parameters bound into this graph by name.
    pub fn bindings(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bindings.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn emit(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, &data)?;
        let requires_grad = self.any_grad(inputs);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, requires_grad))
    }

    /// Adds a leaf; it receives gradients iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        let mut t = tensor;
        t.clear_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Adds a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let t = tensor.with_requires_grad(false);
        self.leaf(t)
    }

    /// Binds a named parameter as a leaf (once per graph). Frozen parameters
    /// enter as constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.bindings.get(name) {
            return Ok(*v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))?;
        let t = p.tensor.clone().with_requires_grad(!p.frozen);
        let v = self.leaf(t);
        self.bindings.insert(name.to_string(), v);
        Ok(v)
    }

    // ---- forward primitives -------------------------------------------------

    /// `[m,k] x [k,n]` or batched `[b,m,k] x [b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for i in 0..batch {
                mm(
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        self.emit("matmul", shape, out, Op::MatMul { a, b, batch, m, k, n }, &[a, b])
    }

    /// Elementwise sum of equal shapes, or `a + b` with `b` a bias over the
    /// trailing dimension of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa == sb {
            let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
            return self.emit("add", sa, out, Op::Add { a, b, bias: false }, &[a, b]);
        }
        if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            let width = sb[0];
            let bd = self.data(b).to_vec();
            let out: Vec<f64> = self
                .data(a)
                .iter()
                .enumerate()
                .map(|(i, x)| x + bd[i % width])
                .collect();
            return self.emit("add", sa, out, Op::Add { a, b, bias: true }, &[a, b]);
        }
        Err(Error::shape("add", &sa, &sb))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa != sb {
            return Err(Error::shape("mul", &sa, &sb));
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        self.emit("mul", sa, out, Op::Mul { a, b }, &[a, b])
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.emit("scale", shape, out, Op::Scale { a, c }, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.emit("add_scalar", shape, out, Op::AddScalar { a }, &[a])
    }

    /// Axis permutation; `perm` must be a permutation of `0..rank`.
    pub fn transpose(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("transpose", format!("{perm:?} is not a permutation of axes of {shape:?}")));
        }
        let (out, out_shape) = permute(self.data(a), &shape, perm);
        self.emit("transpose", out_shape, out, Op::Transpose { a, perm: perm.to_vec() }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(a).to_vec();
        if from.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(Error::shape("reshape", &from, shape));
        }
        let out = self.data(a).to_vec();
        self.emit("reshape", shape.to_vec(), out, Op::Reshape { a }, &[a])
    }

    /// Selects rows along axis 0 (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(Error::invalid("gather_rows", "scalar input"));
        }
        let (n_rows, cols) = row_split(&shape);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n_rows) {
            return Err(Error::invalid("gather_rows", format!("row {bad} out of range for shape {shape:?}")));
        }
        let ad = self.data(a);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&ad[r * cols..(r + 1) * cols]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = rows.len();
        self.emit("gather_rows", out_shape, out, Op::GatherRows { a, rows: rows.to_vec() }, &[a])
    }

    /// Contiguous slice `[start, end)` along axis 0.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..end).collect();
        self.gather_rows(a, &rows)
    }

    /// Concatenation along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat_rows", &[&[0usize][..], &tail].concat(), s));
            }
            rows += s[0];
            out.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        self.emit("concat_rows", shape, out, Op::ConcatRows { parts: parts.to_vec() }, parts)
    }

    /// Rows of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        let (v, d) = match shape.as_slice() {
            [v, d] => (*v, *d),
            _ => return Err(Error::invalid("embedding", format!("table must be 2-d, got {shape:?}"))),
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid("embedding", format!("id {bad} out of range for table of {v} rows")));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        self.emit("embedding", vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let w = *shape.last().ok_or_else(|| Error::invalid("softmax", "scalar input"))?;
        let mut out = self.data(a).to_vec();
        if w > 0 {
            for row in out.chunks_mut(w) {
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
        }
        self.emit("softmax", shape, out, Op::Softmax { a }, &[a])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let w = *shape.last().ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [w] || self.shape(beta) != [w] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let rows = xd.len() / w.max(1);
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * w..(r + 1) * w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..w {
                let h = (row[j] - mean) * is;
                xhat[r * w + j] = h;
                out[r * w + j] = h * gd[j] + bd[j];
            }
        }
        self.emit("layer_norm", shape, out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.emit("gelu", shape, out, Op::Gelu { a }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.emit("relu", shape, out, Op::Relu { a }, &[a])
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| softplus(x)).collect();
        let shape = self.shape(a).to_vec();
        self.emit("softplus", shape, out, Op::Softplus { a }, &[a])
    }

    /// Inverted dropout: train mode zeroes with probability `p` and scales
    /// survivors by `1/(1-p)`; eval mode (or `p == 0`) is the identity and
    /// draws nothing from `rng`.
    pub fn dropout(&mut self, a: Var, p: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("probability {p} outside [0,1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let n = self.value(a).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.uniform() >= p { 1.0 / keep } else { 0.0 })
            .collect();
        let out: Vec<f64> = self.data(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        self.emit("dropout", shape, out, Op::Dropout { a, mask }, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.ln()).collect();
        let shape = self.shape(a).to_vec();
        self.emit("log", shape, out, Op::Log { a }, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        self.emit("exp", shape, out, Op::Exp { a }, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x * x).collect();
        let shape = self.shape(a).to_vec();
        self.emit("square", shape, out, Op::Square { a }, &[a])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.data(a).iter().sum();
        self.emit("sum", Vec::new(), vec![s], Op::Sum { a }, &[a])
    }

    /// Mean of all elements, as a scalar. Empty input is an error.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::invalid("mean", "empty input"));
        }
        let s: f64 = self.data(a).iter().sum::<f64>() / n as f64;
        self.emit("mean", Vec::new(), vec![s], Op::Mean { a }, &[a])
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (&width, lead) = shape
            .split_last()
            .ok_or_else(|| Error::invalid("sum_last", "scalar input"))?;
        let out: Vec<f64> = if width == 0 {
            vec![0.0; lead.iter().product()]
        } else {
            self.data(a).chunks(width).map(|r| r.iter().sum()).collect()
        };
        self.emit("sum_last", lead.to_vec(), out, Op::SumLast { a, width }, &[a])
    }

    /// Per-row `-log softmax(logits)[target]` for `[n, classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (n, c) = match shape.as_slice() {
            [n, c] => (*n, *c),
            _ => return Err(Error::invalid("cross_entropy", format!("logits must be 2-d, got {shape:?}"))),
        };
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::invalid("cross_entropy", format!("target {bad} out of range for {c} classes")));
        }
        let ld = self.data(logits);
        let mut probs = vec![0.0; n * c];
        let mut out = vec![0.0; n];
        for r in 0..n {
            let row = &ld[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            out[r] = lse - row[targets[r]];
        }
        self.emit(
            "cross_entropy",
            vec![n],
            out,
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        )
    }

    /// Batch normalization over axis 0 of `[n, d]` without affine terms.
    /// Train mode normalizes with (biased) batch statistics and folds them
    /// into `stats` (see [`RunningStats`]); eval mode uses `stats`.
    pub fn batch_norm(&mut self, a: Var, mode: Mode, stats: &mut RunningStats, momentum: f64, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (n, d) = match shape.as_slice() {
            [n, d] => (*n, *d),
            _ => return Err(Error::invalid("batch_norm", format!("input must be 2-d, got {shape:?}"))),
        };
        if stats.mean.len() != d || stats.var.len() != d {
            return Err(Error::shape("batch_norm", &shape, &[stats.mean.len()]));
        }
        let ad = self.data(a);
        match mode {
            Mode::Train => {
                if n == 0 {
                    return Err(Error::invalid("batch_norm", "empty batch in train mode"));
                }
                let mut mean = vec![0.0; d];
                let mut var = vec![0.0; d];
                for r in 0..n {
                    for j in 0..d {
                        mean[j] += ad[r * d + j];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                for r in 0..n {
                    for j in 0..d {
                        let c = ad[r * d + j] - mean[j];
                        var[j] += c * c;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let mut xhat = vec![0.0; n * d];
                for r in 0..n {
                    for j in 0..d {
                        xhat[r * d + j] = (ad[r * d + j] - mean[j]) * inv_std[j];
                    }
                }
                check_finite("batch_norm", &xhat)?;
                stats.update(&mean, &var, momentum);
                let out = xhat.clone();
                self.emit("batch_norm", shape, out, Op::BatchNormTrain { a, xhat, inv_std }, &[a])
            }
            Mode::Eval => {
                let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let mut out = vec![0.0; n * d];
                for r in 0..n {
                    for j in 0..d {
                        out[r * d + j] = (ad[r * d + j] - stats.mean[j]) * inv_std[j];
                    }
                }
                self.emit("batch_norm", shape, out, Op::BatchNormEval { a, inv_std }, &[a])
            }
        }
    }

    /// Custom elementwise node with a caller-supplied derivative.
    pub fn map(&mut self, a: Var, f: ElementwiseFn, deriv: ElementwiseFn) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.emit("map", shape, out, Op::Map { a, deriv }, &[a])
    }

    /// `sum_i w_i * a_i` for constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let w = self.constant(Tensor::new(shape, weights.to_vec())?);
        let prod = self.mul(a, w)?;
        self.sum(prod)
    }

    // ---- reverse pass -------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every gradient-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut send = |v: Var, contrib: Vec<f64>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |v: Var| nodes[v.0].value.data();
            let out = node.value.data();
            match &node.op {
                Op::Leaf => leaf_grads.push((id, g)),
                &Op::MatMul { a, b, batch, m, k, n } => {
                    if nodes[a.0].requires_grad {
                        let mut da = vec![0.0; batch * m * k];
                        let bd = val(b);
                        for i in 0..batch {
                            mm_bt(&g[i * m * n..(i + 1) * m * n], &bd[i * k * n..(i + 1) * k * n], &mut da[i * m * k..(i + 1) * m * k], m, k, n);
                        }
                        send(a, da);
                    }
                    if nodes[b.0].requires_grad {
                        let mut db = vec![0.0; batch * k * n];
                        let ad = val(a);
                        for i in 0..batch {
                            mm_at(&ad[i * m * k..(i + 1) * m * k], &g[i * m * n..(i + 1) * m * n], &mut db[i * k * n..(i + 1) * k * n], m, k, n);
                        }
                        send(b, db);
                    }
                }
                &Op::Add { a, b, bias } => {
                    if bias {
                        let width = nodes[b.0].value.numel();
                        let mut db = vec![0.0; width];
                        for (i, gv) in g.iter().enumerate() {
                            db[i % width] += gv;
                        }
                        send(b, db);
                    } else {
                        send(b, g.clone());
                    }
                    send(a, g);
                }
                &Op::Mul { a, b } => {
                    let ad = val(a);
                    let bd = val(b);
                    send(a, g.iter().zip(bd).map(|(x, y)| x * y).collect());
                    send(b, g.iter().zip(ad).map(|(x, y)| x * y).collect());
                }
                &Op::Scale { a, c } => send(a, g.iter().map(|x| x * c).collect()),
                &Op::AddScalar { a } => send(a, g),
                Op::Transpose { a, perm } => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (da, _) = permute(&g, node.value.shape(), &inv);
                    send(*a, da);
                }
                &Op::Reshape { a } => send(a, g),
                Op::GatherRows { a, rows } => {
                    let src = nodes[a.0].value.shape();
                    let (n_rows, cols) = row_split(src);
                    let mut da = vec![0.0; n_rows * cols];
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..cols {
                            da[r * cols + j] += g[i * cols + j];
                        }
                    }
                    send(*a, da);
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p.0].value.numel();
                        send(p, g[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::Embedding { table, ids } => {
                    let d = nodes[table.0].value.shape()[1];
                    let mut dt = vec![0.0; nodes[table.0].value.numel()];
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[i * d + j];
                        }
                    }
                    send(*table, dt);
                }
                &Op::Softmax { a } => {
                    let w = *node.value.shape().last().unwrap();
                    let mut da = vec![0.0; g.len()];
                    if w > 0 {
                        for ((y, dy), dx) in out.chunks(w).zip(g.chunks(w)).zip(da.chunks_mut(w)) {
                            let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                            for j in 0..w {
                                dx[j] = y[j] * (dy[j] - dot);
                            }
                        }
                    }
                    send(a, da);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let w = *node.value.shape().last().unwrap();
                    let gd = val(*gamma);
                    let mut dx = vec![0.0; g.len()];
                    let mut dgamma = vec![0.0; w];
                    let mut dbeta = vec![0.0; w];
                    for r in 0..inv_std.len() {
                        let gr = &g[r * w..(r + 1) * w];
                        let hr = &xhat[r * w..(r + 1) * w];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..w {
                            let dh = gr[j] * gd[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                            dgamma[j] += gr[j] * hr[j];
                            dbeta[j] += gr[j];
                        }
                        let scale = inv_std[r] / w as f64;
                        for j in 0..w {
                            let dh = gr[j] * gd[j];
                            dx[r * w + j] = scale * (w as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    send(*x, dx);
                    send(*gamma, dgamma);
                    send(*beta, dbeta);
                }
                &Op::Gelu { a } => send(a, g.iter().zip(val(a)).map(|(d, &x)| d * gelu_grad(x)).collect()),
                &Op::Relu { a } => send(a, g.iter().zip(val(a)).map(|(d, &x)| if x > 0.0 { *d } else { 0.0 }).collect()),
                &Op::Softplus { a } => send(a, g.iter().zip(val(a)).map(|(d, &x)| d * sigmoid(x)).collect()),
                Op::Dropout { a, mask } => send(*a, g.iter().zip(mask).map(|(d, m)| d * m).collect()),
                &Op::Log { a } => send(a, g.iter().zip(val(a)).map(|(d, x)| d / x).collect()),
                &Op::Exp { a } => send(a, g.iter().zip(out).map(|(d, y)| d * y).collect()),
                &Op::Square { a } => send(a, g.iter().zip(val(a)).map(|(d, x)| 2.0 * d * x).collect()),
                &Op::Sum { a } => send(a, vec![g[0]; nodes[a.0].value.numel()]),
                &Op::Mean { a } => {
                    let n = nodes[a.0].value.numel();
                    send(a, vec![g[0] / n as f64; n]);
                }
                &Op::SumLast { a, width } => {
                    let n = nodes[a.0].value.numel();
                    send(a, (0..n).map(|i| g[i / width.max(1)]).collect());
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let c = nodes[logits.0].value.shape()[1];
                    let mut dl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * c + t] -= 1.0;
                        for j in 0..c {
                            dl[r * c + j] *= g[r];
                        }
                    }
                    send(*logits, dl);
                }
                Op::BatchNormTrain { a, xhat, inv_std } => {
                    let d = inv_std.len();
                    let n = g.len() / d.max(1);
                    let mut sum_g = vec![0.0; d];
                    let mut sum_gh = vec![0.0; d];
                    for r in 0..n {
                        for j in 0..d {
                            sum_g[j] += g[r * d + j];
                            sum_gh[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    let mut da = vec![0.0; g.len()];
                    for r in 0..n {
                        for j in 0..d {
                            let i = r * d + j;
                            da[i] = inv_std[j] / n as f64 * (n as f64 * g[i] - sum_g[j] - xhat[i] * sum_gh[j]);
                        }
                    }
                    send(*a, da);
                }
                Op::BatchNormEval { a, inv_std } => {
                    let d = inv_std.len();
                    send(*a, g.iter().enumerate().map(|(i, gv)| gv * inv_std[i % d]).collect());
                }
                &Op::Map { a, deriv } => send(a, g.iter().zip(val(a)).map(|(d, &x)| d * deriv(x)).collect()),
            }
        }

        for (id, g) in leaf_grads {
            self.nodes[id].value.accumulate_grad(&g)?;
        }
        Ok(())
    }
}
