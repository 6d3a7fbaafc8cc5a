//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node whose inputs are earlier
//! nodes, so the node vector is already a topological order and the
//! backward pass is a single reverse sweep. Parameters enter the graph by
//! reference through [`Graph::param`]; their gradients are collected into a
//! [`ParamGrads`] after [`Graph::backward`].
//!
//! Broadcasting is deliberately narrow: a length-`cols` vector can be added
//! to ([`Graph::add_row`]) or multiplied into ([`Graph::mul_row`]) every row
//! of a matrix. Every other binary op needs identical shapes.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{gemm, moments, softmax_in_place, MatRef, Tensor};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        v: Var,
    },
    MulRow {
        x: Var,
        v: Var,
    },
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SelectRow {
        x: Var,
        row: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::MulRow { .. } => "mul_row",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::Gather { .. } => "gather",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::SelectRow { .. } => "select_row",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node<'p> {
    op: Op,
    value: Cow<'p, Tensor>,
    requires_grad: bool,
}

/// The recorded computation.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    store: Option<&'p ParamStore>,
    param_nodes: Vec<Option<Var>>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    /// A graph without a parameter store; use [`Graph::variable`] for inputs.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            store: None,
            param_nodes: Vec::new(),
        }
    }
}

impl<'p> Graph<'p> {
    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph {
            nodes: Vec::new(),
            store: Some(store),
            param_nodes: vec![None; store.len()],
        }
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

    pub fn op_kind(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// A free leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// The leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let store = self.store.expect("param() needs a graph built with_params");
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Cow::Borrowed(store.get(id)),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    /// `a · b`, or `a · bᵀ` when `trans_b`.
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (br, bc) = self.matrix_dims(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let bview = if trans_b {
                MatRef::transposed(bv, k)
            } else {
                MatRef::row_major(bv, n)
            };
            gemm(m, k, n, MatRef::row_major(av, k), bview, &mut out, false);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul { a, b, trans_b }, Tensor::new([m, n], out)?, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Transpose(a), t, rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), t, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), t, rg))
    }

    fn row_vec_check(&self, x: Var, v: Var, op: &'static str) -> Result<usize> {
        let (tx, tv) = (self.value(x), self.value(v));
        let cols = tx.cols();
        if tv.numel() != cols || tx.shape().is_empty() {
            return Err(Error::shape(op, tx.shape(), tv.shape()));
        }
        Ok(cols)
    }

    /// Adds vector `v` to every row of `x` (bias add, additive masks).
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let cols = self.row_vec_check(x, v, "add_row")?;
        let (tx, tv) = (self.value(x), self.value(v));
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (a, b) in row.iter_mut().zip(tv.data()) {
                *a += b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, v]);
        Ok(self.push(Op::AddRow { x, v }, t, rg))
    }

    /// Multiplies every row of `x` element-wise by vector `v`.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let cols = self.row_vec_check(x, v, "mul_row")?;
        let (tx, tv) = (self.value(x), self.value(v));
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (a, b) in row.iter_mut().zip(tv.data()) {
                *a *= b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, v]);
        Ok(self.push(Op::MulRow { x, v }, t, rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * s).collect())?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Scale(x, s), t, rg))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| f(*v)).collect())?;
        let rg = self.rg(&[x]);
        Ok(self.push(op, t, rg))
    }

    /// Elementwise tanh, kept inside the open interval (-1, 1): plain f64
    /// tanh rounds to ±1 once |x| passes about 19.
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), open_tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Gelu(x), gelu)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.numel() != d || tb.numel() != d {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        if !(eps > 0.0) {
            return Err(Error::Invalid(format!("layer_norm eps must be positive, got {eps}")));
        }
        let rows = tx.outer();
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let (mean, rs) = moments(row, eps);
            rstd[r] = rs;
            for k in 0..d {
                let h = (row[k] - mean) * rs;
                xhat[r * d + k] = h;
                out[r * d + k] = h * tg.data()[k] + tb.data()[k];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            t,
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            softmax_in_place(row);
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Softmax(x), t, rg))
    }

    /// Rows `ids` of a `[V×D]` table, as an `[ids.len()×D]` matrix.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims(table, "gather")?;
        let tt = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Invalid(format!(
                    "gather index {id} out of range for table of {v} rows"
                )));
            }
            data.extend_from_slice(tt.row(id));
        }
        let t = Tensor::new([ids.len(), d], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            t,
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice_cols")?;
        if start + width > c {
            return Err(Error::shape("slice_cols", &[r, c], &[start, width]));
        }
        let tx = self.value(x);
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&tx.row(i)[start..start + width]);
        }
        let t = Tensor::new([r, width], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::SliceCols { x, start }, t, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Invalid("concat_cols of nothing".into()))?;
        let (r, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.matrix_dims(p, "concat_cols")?;
            if pr != r {
                return Err(Error::shape(
                    "concat_cols",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new([r, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), t, rg))
    }

    /// Row `row` of a matrix as a `[1×D]` matrix.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "select_row")?;
        if row >= r {
            return Err(Error::shape("select_row", &[r, c], &[row]));
        }
        let t = Tensor::new([1, c], self.value(x).row(row).to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::SelectRow { x, row }, t, rg))
    }

    /// Mean cross-entropy of row-wise softmax(`logits`) against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", &[n, c], &[targets.len()]));
        }
        let tl = self.value(logits);
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Invalid(format!("target class {t} out of range for {c} classes")));
            }
            let row = &tl.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(&mut probs[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::scalar(loss / n as f64),
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Sum(x), Tensor::scalar(s), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(go) = grads[i].take() else { continue };
            self.backprop_node(node, &go, &mut grads);
            grads[i] = Some(go);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<'_>, go: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.value(v).data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let len = self.nodes[v.0].value.numel();
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(g);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = dims2(self.value(*a));
                let n = node.value.cols();
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    // dA = go · Bᵀ  (or go · B when B was used transposed)
                    let bview = if *trans_b {
                        MatRef::row_major(bv, k)
                    } else {
                        MatRef::transposed(bv, n)
                    };
                    acc(*a, &mut |g| gemm(m, n, k, MatRef::row_major(go, n), bview, g, true));
                }
                if wants(*b) {
                    if *trans_b {
                        // dB[n×k] = goᵀ · A
                        acc(*b, &mut |g| {
                            gemm(n, m, k, MatRef::transposed(go, n), MatRef::row_major(av, k), g, true)
                        });
                    } else {
                        // dB[k×n] = Aᵀ · go
                        acc(*b, &mut |g| {
                            gemm(k, m, n, MatRef::transposed(av, k), MatRef::row_major(go, n), g, true)
                        });
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = dims2(self.value(*a));
                acc(*a, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += go[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        acc(v, &mut |g| add_into(g, go));
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = val(*b);
                    acc(*a, &mut |g| {
                        for ((g, o), y) in g.iter_mut().zip(go).zip(bv) {
                            *g += o * y;
                        }
                    });
                }
                if wants(*b) {
                    let av = val(*a);
                    acc(*b, &mut |g| {
                        for ((g, o), x) in g.iter_mut().zip(go).zip(av) {
                            *g += o * x;
                        }
                    });
                }
            }
            Op::AddRow { x, v } => {
                let cols = node.value.cols();
                if wants(*x) {
                    acc(*x, &mut |g| add_into(g, go));
                }
                if wants(*v) {
                    acc(*v, &mut |g| {
                        for row in go.chunks(cols) {
                            add_into(g, row);
                        }
                    });
                }
            }
            Op::MulRow { x, v } => {
                let cols = node.value.cols();
                let (xv, vv) = (val(*x), val(*v));
                if wants(*x) {
                    acc(*x, &mut |g| {
                        for (grow, orow) in g.chunks_mut(cols).zip(go.chunks(cols)) {
                            for k in 0..cols {
                                grow[k] += orow[k] * vv[k];
                            }
                        }
                    });
                }
                if wants(*v) {
                    acc(*v, &mut |g| {
                        for (orow, xrow) in go.chunks(cols).zip(xv.chunks(cols)) {
                            for k in 0..cols {
                                g[k] += orow[k] * xrow[k];
                            }
                        }
                    });
                }
            }
            Op::Scale(x, s) => acc(*x, &mut |g| {
                for (g, o) in g.iter_mut().zip(go) {
                    *g += o * s;
                }
            }),
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, &mut |g| {
                    for ((g, o), y) in g.iter_mut().zip(go).zip(y) {
                        *g += o * (1.0 - y * y);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                acc(*x, &mut |g| {
                    for ((g, o), x) in g.iter_mut().zip(go).zip(xv) {
                        *g += o * gelu_grad(*x);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let gv = val(*gamma);
                if wants(*gamma) {
                    acc(*gamma, &mut |g| {
                        for (orow, hrow) in go.chunks(d).zip(xhat.chunks(d)) {
                            for k in 0..d {
                                g[k] += orow[k] * hrow[k];
                            }
                        }
                    });
                }
                if wants(*beta) {
                    acc(*beta, &mut |g| {
                        for orow in go.chunks(d) {
                            add_into(g, orow);
                        }
                    });
                }
                if wants(*x) {
                    acc(*x, &mut |g| {
                        let mut dxhat = vec![0.0; d];
                        for (r, (grow, orow)) in g.chunks_mut(d).zip(go.chunks(d)).enumerate() {
                            let hrow = &xhat[r * d..(r + 1) * d];
                            let mut mean_dh = 0.0;
                            let mut mean_dh_h = 0.0;
                            for k in 0..d {
                                dxhat[k] = orow[k] * gv[k];
                                mean_dh += dxhat[k];
                                mean_dh_h += dxhat[k] * hrow[k];
                            }
                            mean_dh /= d as f64;
                            mean_dh_h /= d as f64;
                            for k in 0..d {
                                grow[k] += rstd[r] * (dxhat[k] - mean_dh - hrow[k] * mean_dh_h);
                            }
                        }
                    });
                }
            }
            Op::Softmax(x) => {
                let d = node.value.cols();
                let y = node.value.data();
                acc(*x, &mut |g| {
                    for ((grow, orow), yrow) in g.chunks_mut(d).zip(go.chunks(d)).zip(y.chunks(d)) {
                        let dot: f64 = orow.iter().zip(yrow).map(|(o, y)| o * y).sum();
                        for k in 0..d {
                            grow[k] += yrow[k] * (orow[k] - dot);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = node.value.cols();
                acc(*table, &mut |g| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut g[id * d..(id + 1) * d], &go[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let w = node.value.cols();
                let c = self.value(*x).cols();
                acc(*x, &mut |g| {
                    for (grow, orow) in g.chunks_mut(c).zip(go.chunks(w)) {
                        add_into(&mut grow[*start..*start + w], orow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if wants(p) {
                        acc(p, &mut |g| {
                            for (grow, orow) in g.chunks_mut(w).zip(go.chunks(total)) {
                                add_into(grow, &orow[offset..offset + w]);
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::SelectRow { x, row } => {
                let c = node.value.cols();
                acc(*x, &mut |g| add_into(&mut g[row * c..(row + 1) * c], go));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = targets.len();
                let c = probs.len() / n.max(1);
                let s = go[0] / n as f64;
                acc(*logits, &mut |g| {
                    for (i, &t) in targets.iter().enumerate() {
                        for k in 0..c {
                            let onehot = if k == t { 1.0 } else { 0.0 };
                            g[i * c + k] += s * (probs[i * c + k] - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|v| *v += go[0])),
        }
    }

    /// Parameter gradients for the store this graph was built on; parameters
    /// the loss never touched get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> ParamGrads {
        let store = self.store.expect("param_grads() needs a graph built with_params");
        let mut out = ParamGrads::zeros_like(store);
        for (i, v) in self.param_nodes.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = grads.raw(*v) {
                    out.get_mut(ParamId(i)).data_mut().copy_from_slice(g);
                }
            }
        }
        out
    }

    /// Gradient of `v` as a tensor, zeros when `v` is off the loss path.
    pub fn grad(&self, grads: &Gradients, v: Var) -> Tensor {
        let shape = self.value(v).shape().to_vec();
        match grads.raw(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape matches value"),
            None => Tensor::zeros(shape),
        }
    }
}

/// Result of [`Graph::backward`]: one optional buffer per node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn open_tanh(x: f64) -> f64 {
    let bound = 1.0f64.next_down();
    x.tanh().clamp(-bound, bound)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new([2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(g.grad(&grads, x), Tensor::ones([2, 3]));
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(g.grad(&grads, x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_probs_minus_onehot() {
        let z = vec![0.3, -1.2, 2.0];
        let mut g = Graph::new();
        let x = g.variable(Tensor::new([1, 3], z.clone()).unwrap());
        let loss = g.cross_entropy(x, &[2]).unwrap();
        let grads = g.backward(loss).unwrap();
        let p = Tensor::vector(z).softmax(0).unwrap();
        let expect = [p.data()[0], p.data()[1], p.data()[2] - 1.0];
        for (a, b) in g.grad(&grads, x).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros([2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::ones([2]));
        let y = g.variable(Tensor::ones([3]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(g.grad(&grads, y), Tensor::zeros([3]));
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let a = g.variable(Tensor::new([2, 3], vec![0.1, 0.7, -0.3, 0.9, -0.5, 0.2]).unwrap());
            let b = g.variable(Tensor::new([3, 2], vec![0.4, -0.8, 0.6, 0.1, -0.2, 0.3]).unwrap());
            let m = g.matmul(a, b).unwrap();
            let s = g.softmax(m).unwrap();
            let t = g.tanh(s).unwrap();
            let l = g.sum(t).unwrap();
            let grads = g.backward(l).unwrap();
            (g.grad(&grads, a), g.grad(&grads, b))
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(b1.data(), b2.data());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::zeros([2, 3]));
        let b = g.variable(Tensor::zeros([4, 5]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"));
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut g = Graph::new();
        let t = g.variable(Tensor::zeros([3, 2]));
        assert!(g.gather(t, &[0, 3]).is_err());
    }
}
