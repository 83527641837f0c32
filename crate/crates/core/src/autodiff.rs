//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value and the
//! references needed to run its vector-Jacobian product. `backward` walks the
//! tape once in reverse creation order, so each node is visited after all of
//! its consumers.

use alloc::borrow::Cow;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::param::{Grads, ParamId, ParamStore};
use crate::tensor::{self, gelu_grad_from_tanh, gelu_tanh, gemm, softmax_line, strided_gemm, Tensor};

/// Rows `start..start + key_mask.len()` of a stacked `[rows, d]` matrix that
/// form one attention sequence; keys with `false` are masked out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionSpan {
    pub start: usize,
    pub key_mask: Vec<bool>,
}

impl AttentionSpan {
    pub fn len(&self) -> usize {
        self.key_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.key_mask.is_empty()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Gelu {
        x: Var,
        tanh: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spans: Vec<AttentionSpan>,
        heads: usize,
        scale: f64,
        probs: Vec<Vec<f64>>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Row {
        x: Var,
        index: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Combine {
        weights: Var,
        rows: Var,
    },
    Nll {
        probs: Var,
        label: usize,
    },
    Sum(Var),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Parameters from a [`ParamStore`] are borrowed, not
/// copied, and each parameter maps to a single leaf however often it is used,
/// so shared weights receive the sum of their per-use gradients.
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    param_nodes: Vec<Option<Var>>,
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            param_nodes: Vec::new(),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            param_nodes: vec![None; params.len()],
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// Adds an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let store = self.params.expect("tape has no parameter store");
        let v = self.push(Cow::Borrowed(store.get(id)), Op::Leaf, true);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.param_nodes
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|v| self.grad(v))
    }

    /// Adds every parameter gradient on this tape into `grads`.
    pub fn accumulate_param_grads(&self, grads: &mut Grads) {
        for (i, node) in self.param_nodes.iter().enumerate() {
            if let Some(g) = node.and_then(|v| self.grads[v.0].as_deref()) {
                grads.add(ParamId(i), g);
            }
        }
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = tensor::matmul_dims(av, bv)?;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push_owned(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[1] {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), true, &mut out, 0.0);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push_owned(t, Op::MatMulNT(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push_owned(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds a vector to every row of `a` (length must equal `a`'s last axis).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.len() != av.cols() {
            return Err(Error::Shape {
                op: "add_row",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let cols = av.cols();
        let bias_data = bv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bias_data[i % cols])
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push_owned(t, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push_owned(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("same length");
        self.push_owned(t, Op::Scale(a, factor), &[a])
    }

    /// Elementwise product with a constant (used for dropout masks).
    pub fn mul_const(&mut self, a: Var, factor: Vec<f64>) -> Result<Var> {
        let av = self.value(a);
        if factor.len() != av.len() {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: av.shape().to_vec(),
                rhs: vec![factor.len()],
            });
        }
        let data = av.data().iter().zip(&factor).map(|(x, f)| x * f).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push_owned(t, Op::MulConst(a, factor), &[a]))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let tanh: Vec<f64> = av.data().iter().map(|&x| gelu_tanh(x)).collect();
        let data = av.data().iter().zip(&tanh).map(|(&x, &t)| 0.5 * x * (1.0 + t)).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("same length");
        self.push_owned(t, Op::Gelu { x: a, tanh }, &[a])
    }

    /// Multi-head scaled dot-product attention over independent sequences
    /// stacked along the rows of `q`, `k`, `v` (all `[rows, d]`). Each span
    /// attends only within itself; head `h` uses columns
    /// `h·d/heads .. (h+1)·d/heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spans: &[AttentionSpan], heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.rank() != 2 {
            return Err(Error::Shape {
                op: "attention",
                lhs: qv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        let (rows, d) = (qv.shape()[0], qv.shape()[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape {
                op: "attention heads",
                lhs: qv.shape().to_vec(),
                rhs: vec![heads],
            });
        }
        for span in spans {
            if span.start + span.len() > rows || !span.key_mask.iter().any(|&m| m) {
                return Err(Error::Shape {
                    op: "attention span",
                    lhs: qv.shape().to_vec(),
                    rhs: vec![span.start, span.len()],
                });
            }
        }
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut out = vec![0.0; rows * d];
        let mut probs = Vec::with_capacity(spans.len() * heads);
        for span in spans {
            let n = span.len();
            let base = span.start * d;
            for h in 0..heads {
                let off = base + h * dh;
                let mut scores = vec![0.0; n * n];
                strided_gemm(n, dh, n, &qv.data()[off..], d, 1, &kv.data()[off..], 1, d, &mut scores, n, 1, scale, 0.0);
                let mut p = vec![0.0; n * n];
                for (src, dst) in scores.chunks(n).zip(p.chunks_mut(n)) {
                    softmax_line(src, Some(&span.key_mask), dst);
                }
                strided_gemm(n, n, dh, &p, n, 1, &vv.data()[off..], d, 1, &mut out[off..], d, 1, 1.0, 0.0);
                probs.push(p);
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        Ok(self.push_owned(
            t,
            Op::Attention {
                q,
                k,
                v,
                spans: spans.to_vec(),
                heads,
                scale,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x).softmax(axis)?;
        let (outer, len, inner) = tensor::axis_split(t.shape(), axis)?;
        Ok(self.push_owned(t, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Row-wise softmax over the last axis where columns with
    /// `key_mask[j] == false` receive probability exactly zero.
    pub fn masked_softmax_rows(&mut self, x: Var, key_mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if key_mask.len() != cols || !key_mask.iter().any(|&m| m) {
            return Err(Error::Shape {
                op: "masked_softmax_rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![key_mask.len()],
            });
        }
        let mut out = vec![0.0; xv.len()];
        for (src, dst) in xv.data().chunks(cols).zip(out.chunks_mut(cols)) {
            softmax_line(src, Some(key_mask), dst);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rows = t.rows();
        Ok(self.push_owned(
            t,
            Op::Softmax {
                x,
                outer: rows,
                len: cols,
                inner: 1,
            },
            &[x],
        ))
    }

    /// Layer normalization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if d < 2 {
            return Err(Error::Degenerate(format!(
                "layer norm needs at least 2 features, got {d}"
            )));
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.len() != d || bv.len() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = gv.data()[c] * h + bv.data()[c];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push_owned(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Selects rows of a `[rows, cols]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::Shape {
                op: "gather",
                lhs: tv.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let rows = tv.shape()[0];
        let cols = tv.cols();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    index: id,
                    len: rows,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), cols], out)?;
        Ok(self.push_owned(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// One row of a matrix as a `[1, cols]` matrix.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        if index >= xv.rows() {
            return Err(Error::Index {
                index,
                len: xv.rows(),
            });
        }
        let cols = xv.cols();
        let t = Tensor::new(vec![1, cols], xv.row(index).to_vec())?;
        Ok(self.push_owned(t, Op::Row { x, index }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let t = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push_owned(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w].copy_from_slice(pv.row(r));
            }
            offset += w;
        }
        let t = Tensor::new(vec![rows, total], data)?;
        Ok(self.push_owned(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if start + len > cols {
            return Err(Error::Index {
                index: start + len,
                len: cols,
            });
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let t = Tensor::new(vec![rows, len], data)?;
        Ok(self.push_owned(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push_owned(t, Op::Reshape(x), &[x]))
    }

    /// `Σ_j weights[j] · rows[j]` for `weights: [K]`, `rows: [K, d]`,
    /// accumulated in index order; returns `[1, d]`.
    pub fn combine(&mut self, weights: Var, rows: Var) -> Result<Var> {
        let (wv, rv) = (self.value(weights), self.value(rows));
        if rv.rank() != 2 || wv.len() != rv.rows() {
            return Err(Error::Shape {
                op: "combine",
                lhs: wv.shape().to_vec(),
                rhs: rv.shape().to_vec(),
            });
        }
        let d = rv.cols();
        let mut out = vec![0.0; d];
        for (j, &w) in wv.data().iter().enumerate() {
            for (o, &x) in out.iter_mut().zip(rv.row(j)) {
                if j == 0 {
                    *o = w * x;
                } else {
                    *o += w * x;
                }
            }
        }
        let t = Tensor::new(vec![1, d], out)?;
        Ok(self.push_owned(t, Op::Combine { weights, rows }, &[weights, rows]))
    }

    /// Cross entropy of a probability vector against `label`: `−ln p[label]`.
    pub fn cross_entropy(&mut self, probs: Var, label: usize) -> Result<Var> {
        let pv = self.value(probs);
        let c = pv.len();
        if label >= c {
            return Err(Error::Index { index: label, len: c });
        }
        let total: f64 = pv.data().iter().sum();
        if pv.data().iter().any(|&p| !(p > 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "cross entropy needs a positive distribution summing to 1, got sum {total}"
            )));
        }
        let t = Tensor::scalar(-libm::log(pv.data()[label]));
        Ok(self.push_owned(t, Op::Nll { probs, label }, &[probs]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push_owned(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    // ---- backward ---------------------------------------------------------

    /// Back-propagates from a scalar `loss`, adding into the gradient buffers
    /// of every node that requires grad. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &*node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if let Some(da) = self.slot(adj, *a) {
                    gemm(m, n, k, g, false, bv.data(), true, da, 1.0);
                }
                if let Some(db) = self.slot(adj, *b) {
                    gemm(k, m, n, av.data(), true, g, false, db, 1.0);
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                if let Some(da) = self.slot(adj, *a) {
                    gemm(m, n, k, g, false, bv.data(), false, da, 1.0);
                }
                if let Some(db) = self.slot(adj, *b) {
                    gemm(n, m, k, g, true, av.data(), false, db, 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(adj, v) {
                        d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(d) = self.slot(adj, *a) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let cols = out.cols();
                if let Some(d) = self.slot(adj, *bias) {
                    for row in g.chunks(cols) {
                        d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.slot(adj, *a) {
                    for ((x, gy), y) in d.iter_mut().zip(g).zip(bv) {
                        *x += gy * y;
                    }
                }
                if let Some(d) = self.slot(adj, *b) {
                    for ((x, gy), y) in d.iter_mut().zip(g).zip(av) {
                        *x += gy * y;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(d) = self.slot(adj, *a) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += f * y);
                }
            }
            Op::MulConst(a, f) => {
                if let Some(d) = self.slot(adj, *a) {
                    for ((x, gy), m) in d.iter_mut().zip(g).zip(f) {
                        *x += gy * m;
                    }
                }
            }
            Op::Gelu { x, tanh } => {
                let xv = self.value(*x).data();
                if let Some(d) = self.slot(adj, *x) {
                    for (((dx, gy), &v), &t) in d.iter_mut().zip(g).zip(xv).zip(tanh) {
                        *dx += gy * gelu_grad_from_tanh(v, t);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spans,
                heads,
                scale,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let d = out.cols();
                let dh = d / heads;
                let need_q = self.nodes[q.0].requires_grad;
                let need_k = self.nodes[k.0].requires_grad;
                let need_v = self.nodes[v.0].requires_grad;
                let mut dq = need_q.then(|| vec![0.0; qv.len()]);
                let mut dk = need_k.then(|| vec![0.0; kv.len()]);
                let mut dv = need_v.then(|| vec![0.0; vv.len()]);
                let mut pi = 0;
                for span in spans {
                    let n = span.len();
                    let base = span.start * d;
                    for h in 0..*heads {
                        let off = base + h * dh;
                        let p = &probs[pi];
                        pi += 1;
                        let go = &g[off..];
                        if let Some(dv) = dv.as_mut() {
                            // dV = Pᵀ dO
                            strided_gemm(n, n, dh, p, 1, n, go, d, 1, &mut dv[off..], d, 1, 1.0, 1.0);
                        }
                        if !(need_q || need_k) {
                            continue;
                        }
                        // dP = dO Vᵀ, then dS = P ⊙ (dP − rowsum(dP ⊙ P)) · scale
                        let mut ds = vec![0.0; n * n];
                        strided_gemm(n, dh, n, go, d, 1, &vv[off..], 1, d, &mut ds, n, 1, 1.0, 0.0);
                        for (drow, prow) in ds.chunks_mut(n).zip(p.chunks(n)) {
                            let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                            for (x, &pp) in drow.iter_mut().zip(prow) {
                                *x = pp * (*x - dot) * scale;
                            }
                        }
                        if let Some(dq) = dq.as_mut() {
                            strided_gemm(n, n, dh, &ds, n, 1, &kv[off..], d, 1, &mut dq[off..], d, 1, 1.0, 1.0);
                        }
                        if let Some(dk) = dk.as_mut() {
                            strided_gemm(n, n, dh, &ds, 1, n, &qv[off..], d, 1, &mut dk[off..], d, 1, 1.0, 1.0);
                        }
                    }
                }
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let (Some(buf), Some(slot)) = (buf, self.slot(adj, var)) {
                        slot.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = out.data();
                if let Some(d) = self.slot(adj, *x) {
                    for o in 0..*outer {
                        for c in 0..*inner {
                            let idx = |a: usize| (o * len + a) * inner + c;
                            let dot: f64 = (0..*len).map(|a| g[idx(a)] * y[idx(a)]).sum();
                            for a in 0..*len {
                                d[idx(a)] += y[idx(a)] * (g[idx(a)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = out.cols();
                let gv = self.value(*gain).data();
                if let Some(dg) = self.slot(adj, *gain) {
                    for (row_g, row_h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            dg[c] += row_g[c] * row_h[c];
                        }
                    }
                }
                if let Some(db) = self.slot(adj, *bias) {
                    for row_g in g.chunks(d) {
                        db.iter_mut().zip(row_g).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(dx) = self.slot(adj, *x) {
                    let n = d as f64;
                    for (r, (row_g, row_h)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..d {
                            let dh = row_g[c] * gv[c];
                            sum_dh += dh;
                            sum_dh_h += dh * row_h[c];
                        }
                        let rs = rstd[r];
                        for c in 0..d {
                            let dh = row_g[c] * gv[c];
                            dx[r * d + c] += rs / n * (n * dh - sum_dh - row_h[c] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let cols = out.cols();
                if let Some(d) = self.slot(adj, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * cols..(r + 1) * cols];
                        d[id * cols..(id + 1) * cols]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Row { x, index } => {
                let cols = out.cols();
                if let Some(d) = self.slot(adj, *x) {
                    d[index * cols..(index + 1) * cols]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(d) = self.slot(adj, p) {
                        d.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(a, b)| *a += b);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(d) = self.slot(adj, p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            d[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let w = out.cols();
                let cols = self.value(*x).cols();
                if let Some(d) = self.slot(adj, *x) {
                    for (r, src) in g.chunks(w).enumerate() {
                        d[r * cols + start..r * cols + start + w]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.slot(adj, *x) {
                    d.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Combine { weights, rows } => {
                let (wv, rv) = (self.value(*weights), self.value(*rows));
                let d = rv.cols();
                if let Some(dw) = self.slot(adj, *weights) {
                    for (j, slot) in dw.iter_mut().enumerate() {
                        *slot += rv.row(j).iter().zip(g).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
                if let Some(dr) = self.slot(adj, *rows) {
                    for (j, &w) in wv.data().iter().enumerate() {
                        dr[j * d..(j + 1) * d]
                            .iter_mut()
                            .zip(g)
                            .for_each(|(a, b)| *a += w * b);
                    }
                }
            }
            Op::Nll { probs, label } => {
                let p = self.value(*probs).data()[*label];
                if let Some(d) = self.slot(adj, *probs) {
                    d[*label] -= g[0] / p;
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.slot(adj, *x) {
                    d.iter_mut().for_each(|a| *a += g[0]);
                }
            }
        }
    }

    /// Adjoint buffer for `v`, allocated on first use; `None` when `v` does
    /// not require grad.
    fn slot<'a>(&self, adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(adj[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.5]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.75), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.5]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.0, 3.0]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.0, 3.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.0, 3.0]), true);
        let c = tape.constant(Tensor::vector(vec![5.0, 7.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0, 7.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let p2 = tape.constant(Tensor::vector(vec![0.5, 0.5]));
        let l2 = tape.cross_entropy(p2, 1).unwrap();
        assert!((tape.value(l2).data()[0] - core::f64::consts::LN_2).abs() < 1e-15);
        let third = 1.0 / 3.0;
        let p3 = tape.constant(Tensor::vector(vec![third; 3]));
        let l3 = tape.cross_entropy(p3, 0).unwrap();
        assert!((tape.value(l3).data()[0] - libm::log(3.0)).abs() < 1e-15);
        let one = tape.constant(Tensor::vector(vec![1.0]));
        let l1 = tape.cross_entropy(one, 0).unwrap();
        assert_eq!(tape.value(l1).data()[0], 0.0);
    }

    #[test]
    fn cross_entropy_errors() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![0.5, 0.5]));
        assert!(matches!(tape.cross_entropy(p, 2), Err(Error::Index { .. })));
        let q = tape.constant(Tensor::vector(vec![0.5, 0.7]));
        assert!(matches!(tape.cross_entropy(q, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn layer_norm_edge_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![3.0; 6]));
        let ones = tape.constant(Tensor::filled(&[6], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[6]));
        let y = tape.layer_norm(x, ones, zeros, 1e-12).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let x = tape.constant(Tensor::vector(vec![1.0, -4.0, 2.5, 9.0]));
        let gain = tape.constant(Tensor::zeros(&[4]));
        let bias = tape.constant(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]));
        let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert_eq!(tape.value(y).data(), &[0.1, 0.2, 0.3, 0.4]);

        let x = tape.constant(Tensor::vector(vec![1.0]));
        let g = tape.constant(Tensor::vector(vec![1.0]));
        let b = tape.constant(Tensor::vector(vec![0.0]));
        assert!(matches!(
            tape.layer_norm(x, g, b, 1e-12),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn masked_softmax_zeroes_masked_keys() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 3, vec![1.0, 50.0, 1.0]).unwrap());
        let y = tape.masked_softmax_rows(x, &[true, false, true]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn shared_param_leaf_is_reused() {
        let mut store = ParamStore::new();
        let id = store.add("w", crate::param::ParamGroup::Head, Tensor::vector(vec![2.0]));
        let mut tape = Tape::with_params(&store);
        let a = tape.param(id);
        let b = tape.param(id);
        assert_eq!(a, b);
        let y = tape.mul(a, b).unwrap();
        tape.backward(y).unwrap();
        let mut grads = Grads::for_store(&store);
        tape.accumulate_param_grads(&mut grads);
        assert_eq!(grads.get(id), &[4.0]);
    }
}
