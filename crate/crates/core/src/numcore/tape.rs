//! Append-only operation tape with reverse-mode gradients.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order and the backward sweep is a single reverse pass that
//! visits every node once. Gradients are only propagated into inputs that
//! (transitively) depend on a `requires_grad` leaf; frozen weights never get
//! a gradient buffer.

use std::sync::Arc;

use rayon::prelude::*;

use super::linalg;
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arithmetic precision of recorded values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    /// Every op output is rounded to the nearest `f32`.
    F32,
}

/// Summation order for full reductions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    /// Strict left-to-right order; bitwise reproducible.
    #[default]
    Sequential,
    /// Fixed-size tiles summed in parallel then combined in tile order.
    /// Differs from `Sequential` in the last bits (relative ≤ 1e-10 on
    /// well-conditioned sums) but is still deterministic across runs.
    Tiled { tile: usize },
}

/// Backward rule for an operation implemented outside this module.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input; `None` where `needs[i]` is false.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Gather(Var, Arc<Vec<usize>>),
    Reshape(Var),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation recorder.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    reduction: Reduction,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// `(node id, gradient)` pairs in node order.
    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (Var(i), g)))
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::Contract(format!("{op} expects a matrix, got {s:?}"))),
    }
}

fn last_dim(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
}

fn add_into(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(shape_err("gradient accumulation", acc.shape(), g.shape()));
            }
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            precision: Precision::F64,
            reduction: Reduction::Sequential,
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn with_reduction(mut self, reduction: Reduction) -> Self {
        self.reduction = reduction;
        self
    }

    /// Enables the non-finite output check (on by default in debug builds).
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn precision(&self) -> Precision {
        self.precision
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let value = self.round(value);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn round(&self, value: Tensor) -> Tensor {
        match self.precision {
            Precision::F64 => value,
            Precision::F32 => {
                let mut value = value;
                for x in value.data_mut() {
                    *x = *x as f32 as f64;
                }
                value
            }
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = self.round(value);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an externally computed op. `output` must be the forward value.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let name = op.name();
        self.push(name, output, Op::Custom(inputs.to_vec(), op), inputs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims2(av, "matmul")?;
        let (k2, n) = dims2(bv, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let out = Tensor::from_parts(vec![m, n], linalg::matmul_nn(av.data(), bv.data(), m, k, n));
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims2(av, "matmul_nt")?;
        let (n, k2) = dims2(bv, "matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", av.shape(), bv.shape()));
        }
        let out = Tensor::from_parts(vec![m, n], linalg::matmul_nt(av.data(), bv.data(), m, k, n));
        self.push("matmul_nt", out, Op::MatMulNt(a, b), &[a, b])
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let out = self
            .value(a)
            .zip_map(self.value(b), f)
            .map_err(|_| shape_err(name, self.value(a).shape(), self.value(b).shape()))?;
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn check_row(&self, name: &'static str, a: Var, row: Var) -> Result<usize> {
        let (av, rv) = (self.value(a), self.value(row));
        let d = last_dim(av);
        if rv.rank() != 1 || rv.len() != d || av.rank() == 0 {
            return Err(shape_err(name, av.shape(), rv.shape()));
        }
        Ok(d)
    }

    /// Broadcast add of `row[d]` over the last axis of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let d = self.check_row("add_row", a, row)?;
        let r = self.value(row).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(d) {
            for (x, b) in chunk.iter_mut().zip(r) {
                *x += b;
            }
        }
        self.push("add_row", out, Op::AddRow(a, row), &[a, row])
    }

    /// Broadcast multiply by `row[d]` over the last axis of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let d = self.check_row("mul_row", a, row)?;
        let r = self.value(row).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(d) {
            for (x, b) in chunk.iter_mut().zip(r) {
                *x *= b;
            }
        }
        self.push("mul_row", out, Op::MulRow(a, row), &[a, row])
    }

    fn check_col(&self, name: &'static str, a: Var, col: Var) -> Result<(usize, usize)> {
        let (av, cv) = (self.value(a), self.value(col));
        let (m, n) = dims2(av, name)?;
        if cv.rank() != 1 || cv.len() != m {
            return Err(shape_err(name, av.shape(), cv.shape()));
        }
        Ok((m, n))
    }

    /// `a[m×n] + col[m]` broadcast along columns.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (_, n) = self.check_col("add_col", a, col)?;
        let c = self.value(col).data().to_vec();
        let mut out = self.value(a).clone();
        for (row, ci) in out.data_mut().chunks_mut(n).zip(c) {
            row.iter_mut().for_each(|x| *x += ci);
        }
        self.push("add_col", out, Op::AddCol(a, col), &[a, col])
    }

    /// Scales row `i` of `a[m×n]` by `col[i]`.
    pub fn scale_rows(&mut self, a: Var, col: Var) -> Result<Var> {
        let (_, n) = self.check_col("scale_rows", a, col)?;
        let c = self.value(col).data().to_vec();
        let mut out = self.value(a).clone();
        for (row, ci) in out.data_mut().chunks_mut(n).zip(c) {
            row.iter_mut().for_each(|x| *x *= ci);
        }
        self.push("scale_rows", out, Op::ScaleRows(a, col), &[a, col])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    fn check_scalar(&self, name: &'static str, s: Var) -> Result<f64> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::Contract(format!(
                "{name} expects a single-element scalar, got {:?}",
                sv.shape()
            )));
        }
        Ok(sv.item())
    }

    /// Multiplies every element of `a` by the scalar node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.check_scalar("mul_scalar", s)?;
        let out = self.value(a).map(|x| x * c);
        self.push("mul_scalar", out, Op::MulScalar(a, s), &[a, s])
    }

    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.check_scalar("add_scalar", s)?;
        let out = self.value(a).map(|x| x + c);
        self.push("add_scalar", out, Op::AddScalar(a, s), &[a, s])
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu_value);
        self.push("gelu", out, Op::Gelu(a), &[a])
    }

    /// Normalizes over the last axis with population variance, then applies
    /// `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps < 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be ≥ 0, got {eps}")));
        }
        let d = self.check_row("layer_norm", x, gamma)?;
        self.check_row("layer_norm", x, beta)?;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xv = self.value(x);
        let rows = xv.len() / d;
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            for ((v, gi), bi) in row.iter().zip(g).zip(b) {
                out.push((v - mu) * r * gi + bi);
            }
            mean.push(mu);
            rstd.push(r);
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() == 0 {
            return Err(Error::Contract("softmax needs at least one axis".into()));
        }
        let d = last_dim(av);
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    /// `out[i] = a[index[i]]` reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if shape.iter().product::<usize>() != index.len() {
            return Err(shape_err("gather", &[index.len()], shape));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= av.len()) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {:?}",
                av.shape()
            )));
        }
        let src = av.data();
        let out = Tensor::from_parts(shape.to_vec(), index.iter().map(|&i| src[i]).collect());
        self.push("gather", out, Op::Gather(a, index), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Swaps the two leading axes of a rank-3 tensor.
    pub fn swap01(&mut self, a: Var) -> Result<Var> {
        let [d0, d1, d2] = self.value(a).shape()[..] else {
            return Err(Error::Contract(format!(
                "swap01 expects rank 3, got {:?}",
                self.value(a).shape()
            )));
        };
        let mut index = Vec::with_capacity(d0 * d1 * d2);
        for j in 0..d1 {
            for i in 0..d0 {
                let base = (i * d1 + j) * d2;
                index.extend(base..base + d2);
            }
        }
        self.gather(a, Arc::new(index), &[d1, d0, d2])
    }

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut data = Vec::new();
        let mut lead = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() == 0 || pv.shape()[1..] != tail[..] {
                return Err(shape_err("concat", self.value(*first).shape(), pv.shape()));
            }
            lead += pv.shape()[0];
            data.extend_from_slice(pv.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::from_parts(shape, data);
        self.push("concat", out, Op::Concat(parts.to_vec()), parts)
    }

    fn reduce(&self, data: &[f64]) -> f64 {
        match self.reduction {
            Reduction::Sequential => data.iter().sum(),
            Reduction::Tiled { tile } => {
                let partials: Vec<f64> = data
                    .par_chunks(tile.max(1))
                    .map(|c| c.iter().sum::<f64>())
                    .collect();
                partials.iter().sum()
            }
        }
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.reduce(self.value(a).data());
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let s = self.reduce(av.data()) / av.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Linear map `x·Wᵀ + b` with `W[d×k]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_nt(x, weight)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads: leaves });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                leaves[i] = Some(g);
                continue;
            }
            for (input, ig) in self.input_grads(node, &g)? {
                add_into(&mut grads[input.0], ig)?;
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let mut out = Vec::with_capacity(2);
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(val(*a), "matmul")?;
                let n = val(*b).shape()[1];
                if self.needs(*a) {
                    let ga = linalg::matmul_nt(g.data(), val(*b).data(), m, n, k);
                    out.push((*a, Tensor::from_parts(vec![m, k], ga)));
                }
                if self.needs(*b) {
                    let gb = linalg::matmul_tn(val(*a).data(), g.data(), m, k, n);
                    out.push((*b, Tensor::from_parts(vec![k, n], gb)));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims2(val(*a), "matmul_nt")?;
                let n = val(*b).shape()[0];
                if self.needs(*a) {
                    let ga = linalg::matmul_nn(g.data(), val(*b).data(), m, n, k);
                    out.push((*a, Tensor::from_parts(vec![m, k], ga)));
                }
                if self.needs(*b) {
                    let gb = linalg::matmul_tn(g.data(), val(*a).data(), m, n, k);
                    out.push((*b, Tensor::from_parts(vec![n, k], gb)));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
                if self.needs(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
                if self.needs(*b) {
                    out.push((*b, g.map(|x| -x)));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.zip_map(val(*b), |x, y| x * y)?));
                }
                if self.needs(*b) {
                    out.push((*b, g.zip_map(val(*a), |x, y| x * y)?));
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
                if self.needs(*row) {
                    out.push((*row, column_sums(g.data(), val(*row).len(), None)));
                }
            }
            Op::MulRow(a, row) => {
                let r = val(*row);
                let d = r.len();
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for chunk in ga.data_mut().chunks_mut(d) {
                        chunk.iter_mut().zip(r.data()).for_each(|(x, y)| *x *= y);
                    }
                    out.push((*a, ga));
                }
                if self.needs(*row) {
                    out.push((*row, column_sums(g.data(), d, Some(val(*a).data()))));
                }
            }
            Op::AddCol(a, col) => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
                if self.needs(*col) {
                    let n = last_dim(g);
                    let sums = g.data().chunks(n).map(|r| r.iter().sum()).collect();
                    out.push((*col, Tensor::from_parts(vec![val(*col).len()], sums)));
                }
            }
            Op::ScaleRows(a, col) => {
                let n = last_dim(g);
                let c = val(*col).data();
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for (row, ci) in ga.data_mut().chunks_mut(n).zip(c) {
                        row.iter_mut().for_each(|x| *x *= ci);
                    }
                    out.push((*a, ga));
                }
                if self.needs(*col) {
                    let sums = g
                        .data()
                        .chunks(n)
                        .zip(val(*a).data().chunks(n))
                        .map(|(gr, ar)| linalg::dot(gr, ar))
                        .collect();
                    out.push((*col, Tensor::from_parts(vec![c.len()], sums)));
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    out.push((*a, g.map(|x| x * c)));
                }
            }
            Op::MulScalar(a, s) => {
                let c = val(*s).item();
                if self.needs(*a) {
                    out.push((*a, g.map(|x| x * c)));
                }
                if self.needs(*s) {
                    let d = linalg::dot(g.data(), val(*a).data());
                    out.push((*s, Tensor::from_parts(val(*s).shape().to_vec(), vec![d])));
                }
            }
            Op::AddScalar(a, s) => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
                if self.needs(*s) {
                    out.push((*s, Tensor::from_parts(val(*s).shape().to_vec(), vec![g.sum()])));
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    out.push((*a, g.zip_map(val(*a), |gi, x| gi * gelu_derivative(x))?));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = val(*x);
                let gam = val(*gamma).data();
                let d = gam.len();
                let mut gx = vec![0.0; xv.len()];
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut gxhat = vec![0.0; d];
                for (r, (xrow, grow)) in xv.data().chunks(d).zip(g.data().chunks(d)).enumerate() {
                    for j in 0..d {
                        xhat[j] = (xrow[j] - mean[r]) * rstd[r];
                        gxhat[j] = grow[j] * gam[j];
                        ggamma[j] += grow[j] * xhat[j];
                        gbeta[j] += grow[j];
                    }
                    let m1 = gxhat.iter().sum::<f64>() / d as f64;
                    let m2 = linalg::dot(&gxhat, &xhat) / d as f64;
                    for j in 0..d {
                        gx[r * d + j] = rstd[r] * (gxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if self.needs(*x) {
                    out.push((*x, Tensor::from_parts(xv.shape().to_vec(), gx)));
                }
                if self.needs(*gamma) {
                    out.push((*gamma, Tensor::from_parts(vec![d], ggamma)));
                }
                if self.needs(*beta) {
                    out.push((*beta, Tensor::from_parts(vec![d], gbeta)));
                }
            }
            Op::Softmax(a) => {
                if self.needs(*a) {
                    let y = &node.value;
                    let d = last_dim(y);
                    let mut ga = g.clone();
                    for (grow, yrow) in ga.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                        let s = linalg::dot(grow, yrow);
                        grow.iter_mut().zip(yrow).for_each(|(gi, yi)| *gi = yi * (*gi - s));
                    }
                    out.push((*a, ga));
                }
            }
            Op::Gather(a, index) => {
                if self.needs(*a) {
                    let av = val(*a);
                    let mut ga = vec![0.0; av.len()];
                    for (&i, gi) in index.iter().zip(g.data()) {
                        ga[i] += gi;
                    }
                    out.push((*a, Tensor::from_parts(av.shape().to_vec(), ga)));
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    out.push((*a, g.reshape(val(*a).shape())?));
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if self.needs(p) {
                        let slice = g.data()[offset..offset + n].to_vec();
                        out.push((p, Tensor::from_parts(val(p).shape().to_vec(), slice)));
                    }
                    offset += n;
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    out.push((*a, Tensor::full(val(*a).shape(), g.item())));
                }
            }
            Op::Mean(a) => {
                if self.needs(*a) {
                    let av = val(*a);
                    out.push((*a, Tensor::full(av.shape(), g.item() / av.len() as f64)));
                }
            }
            Op::Custom(inputs, op) => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.needs(*v)).collect();
                let grads = op.backward(&values, &node.value, g, &needs)?;
                for ((v, gi), need) in inputs.iter().zip(grads).zip(needs) {
                    if let (true, Some(gi)) = (need, gi) {
                        if gi.shape() != val(*v).shape() {
                            return Err(shape_err(op.name(), val(*v).shape(), gi.shape()));
                        }
                        out.push((*v, gi));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn column_sums(g: &[f64], d: usize, scale_by: Option<&[f64]>) -> Tensor {
    let mut sums = vec![0.0; d];
    match scale_by {
        None => {
            for chunk in g.chunks(d) {
                sums.iter_mut().zip(chunk).for_each(|(s, x)| *s += x);
            }
        }
        Some(a) => {
            for (gc, ac) in g.chunks(d).zip(a.chunks(d)) {
                for j in 0..d {
                    sums[j] += gc[j] * ac[j];
                }
            }
        }
    }
    Tensor::from_parts(vec![d], sums)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}
