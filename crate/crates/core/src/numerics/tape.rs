//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output value and whatever it needs to
//! replay the adjoint. [`Tape::backward`] walks the nodes in exact reverse
//! order, accumulating (never overwriting) adjoints into inputs. Nodes that
//! do not depend on any gradient-tracked leaf are skipped entirely, so frozen
//! weights cost a forward pass and an input adjoint, nothing more.

use std::collections::HashMap;

use crate::error::{dim_err, Error, Result};
use crate::params::{ParamId, ParamStore};

use super::kernels::{self, MatRef, NormStats, StandardizeStats};
use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Partition of matrix rows into ordered sequences (attention groups, pooling groups).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowGroups {
    rows: Vec<usize>,
    offsets: Vec<usize>,
}

impl RowGroups {
    pub fn new(groups: impl IntoIterator<Item = Vec<usize>>) -> Self {
        let mut rows = Vec::new();
        let mut offsets = vec![0];
        for g in groups {
            rows.extend(g);
            offsets.push(rows.len());
        }
        Self { rows, offsets }
    }

    /// `n` groups of `size` consecutive rows.
    pub fn contiguous(n: usize, size: usize) -> Self {
        Self::new((0..n).map(|g| (g * size..(g + 1) * size).collect()))
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn group(&self, g: usize) -> &[usize] {
        &self.rows[self.offsets[g]..self.offsets[g + 1]]
    }

    fn max_row(&self) -> Option<usize> {
        self.rows.iter().copied().max()
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: NormStats },
    Standardize { x: Var, eps: f64, stats: StandardizeStats },
    Attention { qkv: Var, groups: RowGroups, heads: usize, probs: Vec<f64> },
    GatherRows { x: Var, index: Vec<usize> },
    ConcatRows(Vec<Var>),
    MeanRows { x: Var, groups: RowGroups },
    Dropout { x: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Standardize { .. } => "standardize",
            Op::Attention { .. } => "attention",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::MeanRows { .. } => "mean_rows",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
    scope: usize,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            params: vec![None; store.len()],
            leaves: HashMap::new(),
        }
    }

    /// Gradient of a parameter, `None` if it is frozen or unreachable.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a tracked input leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    /// Accumulate another set of parameter gradients (leaves are dropped).
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_assign(t),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.params.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }
}

/// Recorded computation. Borrows the parameter store for its lifetime, so
/// one store can back many concurrent tapes.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    scopes: Vec<String>,
    scope: usize,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            scopes: vec![String::new()],
            scope: 0,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Label subsequent nodes with a layer name, used in diagnostics.
    pub fn set_scope(&mut self, name: &str) {
        self.scope = match self.scopes.iter().position(|s| s == name) {
            Some(i) => i,
            None => {
                self.scopes.push(name.to_string());
                self.scopes.len() - 1
            }
        };
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
            scope: self.scope,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose adjoint is reported by [`Gradients::wrt`] when tracked.
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let requires_grad = self.params.get(id).trainable;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad,
            scope: self.scope,
        });
        Var(self.nodes.len() - 1)
    }

    /// `op(a) * op(b)` for rank-2 values.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            let av2 = as_matrix(av);
            let bv2 = as_matrix(bv);
            let am = MatRef::maybe_t(av.data(), av2.0, av2.1, ta);
            let bm = MatRef::maybe_t(bv.data(), bv2.0, bv2.1, tb);
            if am.cols != bm.rows {
                return dim_err(format!(
                    "matmul inner extents differ: {:?} vs {:?} (ta={ta}, tb={tb})",
                    av.shape(),
                    bv.shape()
                ));
            }
            let mut out = vec![0.0; am.rows * bm.cols];
            kernels::gemm(1.0, am, bm, 0.0, &mut out);
            Tensor::new([am.rows, bm.cols], out)?
        };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `x * wᵀ + b` with `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul_t(x, false, w, true)?;
        self.add_row(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            same_len(av, bv, "add")?;
            let mut out = av.clone();
            out.add_assign(bv);
            out
        };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            same_len(av, bv, "mul")?;
            let mut out = av.clone();
            out.data_mut()
                .iter_mut()
                .zip(bv.data())
                .for_each(|(x, y)| *x *= y);
            out
        };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Broadcast-add a `[d]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = {
            let (xv, rv) = (self.value(x), self.value(row));
            let d = xv.last_dim();
            if rv.len() != d {
                return dim_err(format!("add_row: row length {} vs feature dim {d}", rv.len()));
            }
            let mut out = xv.clone();
            for chunk in out.data_mut().chunks_mut(d) {
                chunk.iter_mut().zip(rv.data()).for_each(|(a, b)| *a += b);
            }
            out
        };
        let rg = self.requires(x) || self.requires(row);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    /// Broadcast-multiply every row of `x` by a `[d]` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = {
            let (xv, rv) = (self.value(x), self.value(row));
            let d = xv.last_dim();
            if rv.len() != d {
                return dim_err(format!("mul_row: row length {} vs feature dim {d}", rv.len()));
            }
            let mut out = xv.clone();
            for chunk in out.data_mut().chunks_mut(d) {
                chunk.iter_mut().zip(rv.data()).for_each(|(a, b)| *a *= b);
            }
            out
        };
        let rg = self.requires(x) || self.requires(row);
        Ok(self.push(out, Op::MulRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.requires(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = kernels::gelu(self.value(x));
        let rg = self.requires(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = kernels::sigmoid(self.value(x));
        let rg = self.requires(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, stats) =
            kernels::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, stats }, rg))
    }

    /// Row standardization `(x - mean) / (std + eps)`, population std.
    pub fn standardize(&mut self, x: Var, eps: f64) -> Var {
        let (out, stats) = kernels::standardize_forward(self.value(x), eps);
        let rg = self.requires(x);
        self.push(out, Op::Standardize { x, eps, stats }, rg)
    }

    /// Multi-head scaled dot-product attention over packed `qkv: [R, 3d]`.
    ///
    /// Each group of rows forms one sequence; rows attend only within their
    /// group. Output is `[R, d]` with heads concatenated along features.
    pub fn attention(&mut self, qkv: Var, groups: &RowGroups, heads: usize) -> Result<Var> {
        let (out, probs) = {
            let qv = self.value(qkv);
            let d3 = qv.last_dim();
            if d3 % 3 != 0 || heads == 0 || (d3 / 3) % heads != 0 {
                return dim_err(format!(
                    "attention: packed width {d3} not divisible into 3 x {heads} heads"
                ));
            }
            let rows = qv.rows();
            if groups.max_row().is_some_and(|m| m >= rows) {
                return dim_err(format!("attention: group row out of range for {rows} rows"));
            }
            attention_forward(qv.data(), d3 / 3, heads, groups)
        };
        let d = self.value(qkv).last_dim() / 3;
        let rows = self.value(qkv).rows();
        let out = Tensor::new([rows, d], out)?;
        let rg = self.requires(qkv);
        Ok(self.push(
            out,
            Op::Attention {
                qkv,
                groups: groups.clone(),
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Row `i` of the output is row `index[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let d = xv.last_dim();
            let rows = xv.rows();
            let mut out = Vec::with_capacity(index.len() * d);
            for &i in index {
                if i >= rows {
                    return dim_err(format!("gather_rows: index {i} out of {rows} rows"));
                }
                out.extend_from_slice(xv.row(i));
            }
            Tensor::new([index.len(), d], out)?
        };
        let rg = self.requires(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let out = {
            let d = self.value(parts[0]).last_dim();
            let mut out = Vec::new();
            for &p in parts {
                let v = self.value(p);
                if v.last_dim() != d {
                    return dim_err(format!("concat_rows: feature dims {d} vs {}", v.last_dim()));
                }
                out.extend_from_slice(v.data());
            }
            let rows = out.len() / d;
            Tensor::new([rows, d], out)?
        };
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Mean of each row group, output `[groups, d]`.
    pub fn mean_rows(&mut self, x: Var, groups: &RowGroups) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let d = xv.last_dim();
            if groups.max_row().is_some_and(|m| m >= xv.rows()) {
                return dim_err("mean_rows: group row out of range");
            }
            let mut out = vec![0.0; groups.len() * d];
            for g in 0..groups.len() {
                let rows = groups.group(g);
                if rows.is_empty() {
                    return Err(Error::Contract("mean over an empty group".into()));
                }
                let dst = &mut out[g * d..(g + 1) * d];
                for &r in rows {
                    dst.iter_mut().zip(xv.row(r)).for_each(|(a, b)| *a += b);
                }
                let inv = 1.0 / rows.len() as f64;
                dst.iter_mut().for_each(|v| *v *= inv);
            }
            Tensor::new([groups.len(), d], out)?
        };
        let rg = self.requires(x);
        Ok(self.push(
            out,
            Op::MeanRows {
                x,
                groups: groups.clone(),
            },
            rg,
        ))
    }

    /// Elementwise multiply by a fixed mask (already carrying the inverted
    /// dropout rescale).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            if mask.len() != xv.len() {
                return dim_err("dropout mask length");
            }
            let mut out = xv.clone();
            out.data_mut()
                .iter_mut()
                .zip(&mask)
                .for_each(|(a, m)| *a *= m);
            out
        };
        let rg = self.requires(x);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// Mean cross-entropy of `logits: [B, C]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::cross_entropy_forward(self.value(logits), labels)?;
        let rg = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.requires(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// First recorded node holding a non-finite value, as `(layer scope, op)`.
    pub fn first_non_finite(&self) -> Option<(String, &'static str)> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            let finite = match &n.value {
                Some(t) => t.is_finite(),
                None => self.value(Var(i)).is_finite(),
            };
            (!finite).then(|| (self.scopes[n.scope].clone(), n.op.name()))
        })
    }

    /// Propagate adjoints from a scalar loss back to every tracked leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads = Gradients::zeros_like(self.params);
        if !self.requires(loss) {
            return Ok(grads);
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(i, &node.op, g, &mut adj, &mut grads);
        }
        Ok(grads)
    }

    fn backprop_node(
        &self,
        i: usize,
        op: &Op,
        g: Vec<f64>,
        adj: &mut [Option<Vec<f64>>],
        grads: &mut Gradients,
    ) {
        let out = self.value(Var(i));
        match op {
            Op::Leaf => {
                let t = Tensor::new(out.shape().to_vec(), g).expect("leaf grad shape");
                grads
                    .leaves
                    .entry(i)
                    .and_modify(|e| e.add_assign(&t))
                    .or_insert(t);
            }
            Op::Param(id) => {
                let t = Tensor::new(out.shape().to_vec(), g).expect("param grad shape");
                match &mut grads.params[id.0] {
                    Some(e) => e.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ar, ac) = as_matrix(av);
                let (br, bc) = as_matrix(bv);
                let al = MatRef::maybe_t(av.data(), ar, ac, *ta);
                let bl = MatRef::maybe_t(bv.data(), br, bc, *tb);
                let dc = MatRef::row_major(&g, al.rows, bl.cols);
                if self.requires(*a) {
                    let mut da = vec![0.0; av.len()];
                    if *ta {
                        // stored [k, m] = B_l * dCᵀ
                        kernels::gemm(1.0, bl, dc.t(), 0.0, &mut da);
                    } else {
                        kernels::gemm(1.0, dc, bl.t(), 0.0, &mut da);
                    }
                    accumulate(adj, *a, da);
                }
                if self.requires(*b) {
                    let mut db = vec![0.0; bv.len()];
                    if *tb {
                        // stored [n, k] = dCᵀ * A_l
                        kernels::gemm(1.0, dc.t(), al, 0.0, &mut db);
                    } else {
                        kernels::gemm(1.0, al.t(), dc, 0.0, &mut db);
                    }
                    accumulate(adj, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.requires(*b) {
                    accumulate(adj, *b, g.clone());
                }
                if self.requires(*a) {
                    accumulate(adj, *a, g);
                }
            }
            Op::AddRow(x, row) => {
                if self.requires(*row) {
                    let d = out.last_dim();
                    let mut dr = vec![0.0; d];
                    for chunk in g.chunks(d) {
                        dr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                    accumulate(adj, *row, dr);
                }
                if self.requires(*x) {
                    accumulate(adj, *x, g);
                }
            }
            Op::MulRow(x, row) => {
                let d = out.last_dim();
                let (xv, rv) = (self.value(*x), self.value(*row));
                if self.requires(*row) {
                    let mut dr = vec![0.0; d];
                    for (gc, xc) in g.chunks(d).zip(xv.data().chunks(d)) {
                        for k in 0..d {
                            dr[k] += gc[k] * xc[k];
                        }
                    }
                    accumulate(adj, *row, dr);
                }
                if self.requires(*x) {
                    let mut dx = g;
                    for chunk in dx.chunks_mut(d) {
                        chunk.iter_mut().zip(rv.data()).for_each(|(a, b)| *a *= b);
                    }
                    accumulate(adj, *x, dx);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires(*a) {
                    let da = g.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    accumulate(adj, *a, da);
                }
                if self.requires(*b) {
                    let db = g.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    accumulate(adj, *b, db);
                }
            }
            Op::Scale(x, s) => {
                let dx = g.iter().map(|v| v * s).collect();
                accumulate(adj, *x, dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let dx = g
                    .iter()
                    .zip(xv.data())
                    .map(|(gi, &xi)| gi * kernels::gelu_grad(xi))
                    .collect();
                accumulate(adj, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = g
                    .iter()
                    .zip(out.data())
                    .map(|(gi, &s)| gi * s * (1.0 - s))
                    .collect();
                accumulate(adj, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let d = out.last_dim();
                let (dx, dg, db) =
                    kernels::layer_norm_backward(&g, stats, self.value(*gamma).data(), d);
                if self.requires(*gamma) {
                    accumulate(adj, *gamma, dg);
                }
                if self.requires(*beta) {
                    accumulate(adj, *beta, db);
                }
                if self.requires(*x) {
                    accumulate(adj, *x, dx);
                }
            }
            Op::Standardize { x, eps, stats } => {
                let dx = kernels::standardize_backward(&g, stats, *eps, out.last_dim());
                accumulate(adj, *x, dx);
            }
            Op::Attention {
                qkv,
                groups,
                heads,
                probs,
            } => {
                let qv = self.value(*qkv);
                let dqkv = attention_backward(qv.data(), &g, qv.last_dim() / 3, *heads, groups, probs);
                accumulate(adj, *qkv, dqkv);
            }
            Op::GatherRows { x, index } => {
                let xv = self.value(*x);
                let d = xv.last_dim();
                let mut dx = vec![0.0; xv.len()];
                for (o, &src) in index.iter().enumerate() {
                    let dst = &mut dx[src * d..(src + 1) * d];
                    dst.iter_mut()
                        .zip(&g[o * d..(o + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                accumulate(adj, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.requires(p) {
                        accumulate(adj, p, g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::MeanRows { x, groups } => {
                let xv = self.value(*x);
                let d = xv.last_dim();
                let mut dx = vec![0.0; xv.len()];
                for gi in 0..groups.len() {
                    let rows = groups.group(gi);
                    let inv = 1.0 / rows.len() as f64;
                    let src = &g[gi * d..(gi + 1) * d];
                    for &r in rows {
                        dx[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b * inv);
                    }
                }
                accumulate(adj, *x, dx);
            }
            Op::Dropout { x, mask } => {
                let dx = g.iter().zip(mask).map(|(a, m)| a * m).collect();
                accumulate(adj, *x, dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).last_dim();
                let scale = g[0] / labels.len() as f64;
                let mut dl = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    dl[r * c + l] -= 1.0;
                }
                dl.iter_mut().for_each(|v| *v *= scale);
                accumulate(adj, *logits, dl);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                accumulate(adj, *x, vec![g[0]; n]);
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot => *slot = Some(g),
    }
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    if t.rank() == 2 {
        (t.shape()[0], t.shape()[1])
    } else {
        (t.rows(), t.last_dim())
    }
}

fn same_len(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.len() != b.len() {
        return dim_err(format!("{what}: shapes {:?} and {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn attention_forward(qkv: &[f64], d: usize, heads: usize, groups: &RowGroups) -> (Vec<f64>, Vec<f64>) {
    let d3 = 3 * d;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let rows = qkv.len() / d3;
    let mut out = vec![0.0; rows * d];
    let total: usize = (0..groups.len()).map(|g| groups.group(g).len().pow(2)).sum();
    let mut probs = Vec::with_capacity(total * heads);
    for gi in 0..groups.len() {
        let rs = groups.group(gi);
        let l = rs.len();
        for h in 0..heads {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            for &ri in rs {
                let q = &qkv[ri * d3 + qo..ri * d3 + qo + dh];
                let start = probs.len();
                for &rj in rs {
                    let k = &qkv[rj * d3 + ko..rj * d3 + ko + dh];
                    probs.push(dot(q, k) * scale);
                }
                kernels::softmax_in_place(&mut probs[start..start + l]);
                let o = &mut out[ri * d + h * dh..ri * d + (h + 1) * dh];
                for (j, &rj) in rs.iter().enumerate() {
                    let p = probs[start + j];
                    let v = &qkv[rj * d3 + vo..rj * d3 + vo + dh];
                    o.iter_mut().zip(v).for_each(|(a, b)| *a += p * b);
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward(
    qkv: &[f64],
    dout: &[f64],
    d: usize,
    heads: usize,
    groups: &RowGroups,
    probs: &[f64],
) -> Vec<f64> {
    let d3 = 3 * d;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dqkv = vec![0.0; qkv.len()];
    let mut cursor = 0;
    let mut ds = Vec::new();
    for gi in 0..groups.len() {
        let rs = groups.group(gi);
        let l = rs.len();
        for h in 0..heads {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            for &ri in rs {
                let p = &probs[cursor..cursor + l];
                cursor += l;
                let go = &dout[ri * d + h * dh..ri * d + (h + 1) * dh];
                ds.clear();
                let mut weighted = 0.0;
                for (j, &rj) in rs.iter().enumerate() {
                    let v = &qkv[rj * d3 + vo..rj * d3 + vo + dh];
                    let dp = dot(go, v);
                    ds.push(dp);
                    weighted += p[j] * dp;
                    let dv = &mut dqkv[rj * d3 + vo..rj * d3 + vo + dh];
                    dv.iter_mut().zip(go).for_each(|(a, b)| *a += p[j] * b);
                }
                for (j, &rj) in rs.iter().enumerate() {
                    let dsij = p[j] * (ds[j] - weighted) * scale;
                    if dsij == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        let kj = qkv[rj * d3 + ko + c];
                        let qi = qkv[ri * d3 + qo + c];
                        dqkv[ri * d3 + qo + c] += dsij * kj;
                        dqkv[rj * d3 + ko + c] += dsij * qi;
                    }
                }
            }
        }
    }
    dqkv
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
