//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its output value and whatever it needs to
//! replay the backward rule. [`Tape::backward`] walks the nodes in exact
//! reverse order and *adds* into the gradient buffers, so several losses may
//! be backpropagated separately into the same [`Gradients`].
//!
//! Nodes whose inputs are all constants (including frozen parameters) are
//! marked as not requiring gradients and are skipped during the backward walk.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{NumError, Result};
use crate::kernels::{gelu, gelu_grad, gemm, softmax_row, MatRef};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::LAYER_NORM_EPS;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Minimum(Var, Var),
    Reshape(Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    store_uid: Option<u64>,
    param_vars: HashMap<ParamId, Var>,
    leaf_grads: HashMap<usize, Tensor>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Parameters live in their store and are unaffected.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_vars.clear();
        self.leaf_grads.clear();
        self.store_uid = None;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a non-parameter leaf created with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(&v.0)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumError::NonFinite(name));
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|e| NumError::shape(op, e.to_string()))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Records a parameter leaf. Repeated requests for the same parameter on one
    /// tape return the same [`Var`]. A tape binds to the first store it sees.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        match self.store_uid {
            Some(uid) if uid != store.uid() => {
                return Err(NumError::Contract(
                    "tape already records parameters of a different store".into(),
                ))
            }
            None => self.store_uid = Some(store.uid()),
            _ => {}
        }
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let value = store.get_arc(id).clone();
        if !value.is_finite() {
            return Err(NumError::NonFinite("param"));
        }
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
            requires_grad: !store.is_frozen(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(NumError::shape("matmul", format!("({m}x{k}) · ({k2}x{n})")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            0.0,
            &mut out,
            n,
        );
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// `x · w + b` with the bias broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.dims(x, "linear")?;
        let (k2, n) = self.dims(w, "linear")?;
        if k != k2 {
            return Err(NumError::shape("linear", format!("({m}x{k}) · ({k2}x{n})")));
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != n {
                return Err(NumError::shape("linear", format!("bias {} vs {n}", bias.len())));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            MatRef::new(self.value(x).data(), m, k),
            MatRef::new(self.value(w).data(), k, n),
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out,
            n,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(Tensor::new(vec![m, n], out)?, Op::Linear { x, w, b }, rg, "linear")
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NumError::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg, name)
    }

    fn map(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| f(*x)).collect())?;
        let rg = self.rg(&[a]);
        self.push(t, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Minimum(a, b), "minimum", f64::min)
    }

    /// Adds a length-`n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "add_row")?;
        let r = self.value(row).data();
        if r.len() != n {
            return Err(NumError::shape("add_row", format!("row {} vs {n} columns", r.len())));
        }
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n.max(1)).take(m) {
            for (x, y) in chunk.iter_mut().zip(r) {
                *x += y;
            }
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        self.push(t, Op::AddRow(a, row), rg, "add_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, c), "scale", |x| c * x)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), "exp", f64::exp)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Gelu(a), "gelu", gelu)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(NumError::Config(format!("clamp bounds {lo} > {hi}")));
        }
        self.map(a, Op::Clamp { x: a, lo, hi }, "clamp", |x| x.clamp(lo, hi))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Reshape(a), rg, "reshape")
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "layer_norm")?;
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        if g.len() != n || b.len() != n {
            return Err(NumError::shape("layer_norm", format!("gain/bias vs {n} columns")));
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
            "layer_norm",
        )
    }

    /// Softmax over the last axis. `mask[i] == true` keeps entry `i`; masked
    /// entries come out as exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims(x, "softmax")?;
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return Err(NumError::shape("softmax", format!("mask {} vs {}", mk.len(), m * n)));
            }
        }
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            let mrow = mask.map(|mk| &mk[i * n..(i + 1) * n]);
            if !softmax_row(&mut data[i * n..(i + 1) * n], mrow) {
                return Err(NumError::Degenerate { op: "softmax", row: i });
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg, "softmax")
    }

    /// Multi-head scaled dot-product attention over pre-projected
    /// `q: [n, d]`, `k: [m, d]`, `v: [m, d]`; heads split `d` evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (n, d) = self.dims(q, "attention")?;
        let (m, dk) = self.dims(k, "attention")?;
        let (mv, dv) = self.dims(v, "attention")?;
        if dk != d || dv != d || mv != m || heads == 0 || d % heads != 0 {
            return Err(NumError::shape(
                "attention",
                format!("q {n}x{d}, k {m}x{dk}, v {mv}x{dv}, heads {heads}"),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            gemm(
                MatRef::block(qd, n, d, h * dh, dh),
                MatRef::block(kd, m, d, h * dh, dh).t(),
                0.0,
                p,
                m,
            );
            for row in p.chunks_mut(m) {
                row.iter_mut().for_each(|s| *s *= scale);
                softmax_row(row, None);
            }
            gemm(
                MatRef::new(p, n, m),
                MatRef::block(vd, m, d, h * dh, dh),
                0.0,
                &mut out[h * dh..],
                d,
            );
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            Tensor::new(vec![n, d], out)?,
            Op::Attention { q, k, v, heads, probs },
            rg,
            "attention",
        )
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims(table, "embedding")?;
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(NumError::Index {
                    op: "embedding",
                    index: id,
                    bound: rows,
                });
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "embedding",
        )
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`. Returns `x`
    /// unchanged when disabled or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R, enabled: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumError::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !enabled || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let xs = self.value(x);
        let scale: Vec<f64> = (0..xs.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = xs.data().iter().zip(&scale).map(|(a, s)| a * s).collect();
        let t = Tensor::new(xs.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Dropout { x, scale }, rg, "dropout")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.dims(a, "concat_cols")?;
        let (m2, q) = self.dims(b, "concat_cols")?;
        if m != m2 {
            return Err(NumError::shape("concat_cols", format!("{m} vs {m2} rows")));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(&da[i * p..(i + 1) * p]);
            data.extend_from_slice(&db[i * q..(i + 1) * q]);
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, p + q], data)?, Op::ConcatCols(a, b), rg, "concat_cols")
    }

    /// Stacks matrices (or row vectors) with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| NumError::shape("concat_rows", "no inputs"))?;
        let n = self.dims(*first, "concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, c) = self.dims(p, "concat_rows")?;
            if c != n {
                return Err(NumError::shape("concat_rows", format!("{c} vs {n} columns")));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::new(vec![rows, n], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
            "concat_rows",
        )
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x, "select_rows")?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(NumError::Index {
                    op: "select_rows",
                    index: r,
                    bound: m,
                });
            }
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(vec![rows.len(), n], data)?,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
            "select_rows",
        )
    }

    /// Column means, `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "mean_rows")?;
        if m == 0 {
            return Err(NumError::shape("mean_rows", "no rows"));
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; n];
        for row in src.chunks(n) {
            for (d, v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d /= m as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![1, n], data)?, Op::MeanRows(x), rg, "mean_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        if xs.is_empty() {
            return Err(NumError::shape("mean", "empty tensor"));
        }
        let s = xs.data().iter().sum::<f64>() / xs.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg, "mean")
    }

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`, optionally
    /// restricted to `mask`-valid entries.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims(logits, "cross_entropy")?;
        if targets.len() != m || m == 0 {
            return Err(NumError::shape(
                "cross_entropy",
                format!("{} targets for {m} rows", targets.len()),
            ));
        }
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return Err(NumError::shape("cross_entropy", "mask size"));
            }
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let mrow = mask.map(|mk| &mk[i * n..(i + 1) * n]);
            if t >= n || mrow.is_some_and(|r| !r[t]) {
                return Err(NumError::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: n,
                });
            }
            let row = &self.value(logits).data()[i * n..(i + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if mrow.map_or(true, |r| r[j]) {
                    max = max.max(row[j]);
                }
            }
            let lse = max
                + (0..n)
                    .filter(|&j| mrow.map_or(true, |r| r[j]))
                    .map(|j| (row[j] - max).exp())
                    .sum::<f64>()
                    .ln();
            loss += lse - row[t];
            softmax_row(&mut probs[i * n..(i + 1) * n], mrow);
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss / m as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
            "cross_entropy",
        )
    }

    /// Log-probability of `target` under the masked softmax of a logit row.
    pub fn log_prob(&mut self, logits: Var, target: usize, mask: Option<&[bool]>) -> Result<Var> {
        let n = self.value(logits).len();
        let row = self.reshape(logits, vec![1, n])?;
        let ce = self.cross_entropy(row, &[target], mask)?;
        self.scale(ce, -1.0)
    }

    /// Accumulates d(loss)/d(param) into `grads` and d(loss)/d(leaf) into the
    /// tape's leaf accumulators. Gradients add to whatever is already present.
    pub fn backward(&mut self, loss: Var, grads: &mut Gradients) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(NumError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut g: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        g.resize_with(loss.0 + 1, || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        g[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;

        for i in (0..=loss.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        let acc = self
                            .leaf_grads
                            .entry(i)
                            .or_insert_with(|| Tensor::zeros(node.value.shape()));
                        add_into(acc.data_mut(), &dy);
                    }
                }
                Op::Param(id) => {
                    let acc = grads.get_mut(*id);
                    if acc.len() != dy.len() {
                        return Err(NumError::Contract(
                            "gradient buffer does not match parameter store".into(),
                        ));
                    }
                    add_into(acc.data_mut(), &dy);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = nodes[a.0].value.dims2()?;
                    let n = nodes[b.0].value.cols();
                    if let Some(da) = slot(&mut g, nodes, *a) {
                        gemm(
                            MatRef::new(&dy, m, n),
                            MatRef::new(nodes[b.0].value.data(), k, n).t(),
                            1.0,
                            da,
                            k,
                        );
                    }
                    if let Some(db) = slot(&mut g, nodes, *b) {
                        gemm(
                            MatRef::new(nodes[a.0].value.data(), m, k).t(),
                            MatRef::new(&dy, m, n),
                            1.0,
                            db,
                            n,
                        );
                    }
                }
                Op::Linear { x, w, b } => {
                    let (m, k) = nodes[x.0].value.dims2()?;
                    let n = nodes[w.0].value.cols();
                    if let Some(dx) = slot(&mut g, nodes, *x) {
                        gemm(
                            MatRef::new(&dy, m, n),
                            MatRef::new(nodes[w.0].value.data(), k, n).t(),
                            1.0,
                            dx,
                            k,
                        );
                    }
                    if let Some(dw) = slot(&mut g, nodes, *w) {
                        gemm(
                            MatRef::new(nodes[x.0].value.data(), m, k).t(),
                            MatRef::new(&dy, m, n),
                            1.0,
                            dw,
                            n,
                        );
                    }
                    if let Some(b) = b {
                        if let Some(db) = slot(&mut g, nodes, *b) {
                            for row in dy.chunks(n) {
                                add_into(db, row);
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    if let Some(da) = slot(&mut g, nodes, *a) {
                        add_into(da, &dy);
                    }
                    if let Some(db) = slot(&mut g, nodes, *b) {
                        add_into(db, &dy);
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(da) = slot(&mut g, nodes, *a) {
                        add_into(da, &dy);
                    }
                    if let Some(db) = slot(&mut g, nodes, *b) {
                        db.iter_mut().zip(&dy).for_each(|(d, v)| *d -= v);
                    }
                }
                Op::Mul(a, b) => {
                    if let Some(da) = slot(&mut g, nodes, *a) {
                        let bv = nodes[b.0].value.data();
                        for ((d, v), y) in da.iter_mut().zip(&dy).zip(bv) {
                            *d += v * y;
                        }
                    }
                    if let Some(db) = slot(&mut g, nodes, *b) {
                        let av = nodes[a.0].value.data();
                        for ((d, v), y) in db.iter_mut().zip(&dy).zip(av) {
                            *d += v * y;
                        }
                    }
                }
                Op::Minimum(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(da) = slot(&mut g, nodes, *a) {
                        for j in 0..dy.len() {
                            if av[j] <= bv[j] {
                                da[j] += dy[j];
                            }
                        }
                    }
                    if let Some(db) = slot(&mut g, nodes, *b) {
                        for j in 0..dy.len() {
                            if av[j] > bv[j] {
                                db[j] += dy[j];
                            }
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    let n = nodes[row.0].value.len();
                    if let Some(da) = slot(&mut g, nodes, *a) {
                        add_into(da, &dy);
                    }
                    if let Some(dr) = slot(&mut g, nodes, *row) {
                        for chunk in dy.chunks(n.max(1)) {
                            add_into(dr, chunk);
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if let Some(da) = slot(&mut g, nodes, *a) {
                        da.iter_mut().zip(&dy).for_each(|(d, v)| *d += c * v);
                    }
                }
                Op::Exp(a) => {
                    let y = node.value.data();
                    if let Some(da) = slot(&mut g, nodes, *a) {
                        for ((d, v), yy) in da.iter_mut().zip(&dy).zip(y) {
                            *d += v * yy;
                        }
                    }
                }
                Op::Gelu(a) => {
                    let x = nodes[a.0].value.data();
                    if let Some(da) = slot(&mut g, nodes, *a) {
                        for ((d, v), xx) in da.iter_mut().zip(&dy).zip(x) {
                            *d += v * gelu_grad(*xx);
                        }
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = nodes[x.0].value.data();
                    if let Some(dx) = slot(&mut g, nodes, *x) {
                        for j in 0..dy.len() {
                            if xv[j] >= *lo && xv[j] <= *hi {
                                dx[j] += dy[j];
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    if let Some(da) = slot(&mut g, nodes, *a) {
                        add_into(da, &dy);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let n = nodes[gain.0].value.len();
                    let gv = nodes[gain.0].value.data();
                    if let Some(dg) = slot(&mut g, nodes, *gain) {
                        for (row, hrow) in dy.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                dg[j] += row[j] * hrow[j];
                            }
                        }
                    }
                    if let Some(db) = slot(&mut g, nodes, *bias) {
                        for row in dy.chunks(n) {
                            add_into(db, row);
                        }
                    }
                    if let Some(dx) = slot(&mut g, nodes, *x) {
                        let mut dxhat = vec![0.0; n];
                        for (i, r) in rstd.iter().enumerate() {
                            let row = &dy[i * n..(i + 1) * n];
                            let h = &xhat[i * n..(i + 1) * n];
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..n {
                                dxhat[j] = row[j] * gv[j];
                                m1 += dxhat[j];
                                m2 += dxhat[j] * h[j];
                            }
                            m1 /= n as f64;
                            m2 /= n as f64;
                            for j in 0..n {
                                dx[i * n + j] += r * (dxhat[j] - m1 - h[j] * m2);
                            }
                        }
                    }
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let n = node.value.cols();
                    if let Some(dx) = slot(&mut g, nodes, *x) {
                        for i in 0..y.len() / n.max(1) {
                            let yr = &y[i * n..(i + 1) * n];
                            let gr = &dy[i * n..(i + 1) * n];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                dx[i * n + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (n, d) = nodes[q.0].value.dims2()?;
                    let m = nodes[k.0].value.rows();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let (qd, kd, vd) = (
                        nodes[q.0].value.data(),
                        nodes[k.0].value.data(),
                        nodes[v.0].value.data(),
                    );
                    let need_q = nodes[q.0].requires_grad;
                    let need_k = nodes[k.0].requires_grad;
                    let mut dq = vec![0.0; if need_q { n * d } else { 0 }];
                    let mut dk = vec![0.0; if need_k { m * d } else { 0 }];
                    let need_v = nodes[v.0].requires_grad;
                    let mut dv = vec![0.0; if need_v { m * d } else { 0 }];
                    let mut ds = vec![0.0; n * m];
                    for h in 0..*heads {
                        let p = &probs[h * n * m..(h + 1) * n * m];
                        let dout = MatRef::block(&dy, n, d, h * dh, dh);
                        if need_v {
                            gemm(MatRef::new(p, n, m).t(), dout, 0.0, &mut dv[h * dh..], d);
                        }
                        if need_q || need_k {
                            gemm(dout, MatRef::block(vd, m, d, h * dh, dh).t(), 0.0, &mut ds, m);
                            for i in 0..n {
                                let pr = &p[i * m..(i + 1) * m];
                                let dr = &mut ds[i * m..(i + 1) * m];
                                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                                for j in 0..m {
                                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                                }
                            }
                            if need_q {
                                gemm(
                                    MatRef::new(&ds, n, m),
                                    MatRef::block(kd, m, d, h * dh, dh),
                                    0.0,
                                    &mut dq[h * dh..],
                                    d,
                                );
                            }
                            if need_k {
                                gemm(
                                    MatRef::new(&ds, n, m).t(),
                                    MatRef::block(qd, n, d, h * dh, dh),
                                    0.0,
                                    &mut dk[h * dh..],
                                    d,
                                );
                            }
                        }
                    }
                    if need_q {
                        add_into(slot(&mut g, nodes, *q).unwrap(), &dq);
                    }
                    if need_k {
                        add_into(slot(&mut g, nodes, *k).unwrap(), &dk);
                    }
                    if need_v {
                        add_into(slot(&mut g, nodes, *v).unwrap(), &dv);
                    }
                }
                Op::Embedding { table, ids } => {
                    let d = nodes[table.0].value.cols();
                    if let Some(dt) = slot(&mut g, nodes, *table) {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut dt[id * d..(id + 1) * d], &dy[r * d..(r + 1) * d]);
                        }
                    }
                }
                Op::Dropout { x, scale } => {
                    if let Some(dx) = slot(&mut g, nodes, *x) {
                        for ((d, v), s) in dx.iter_mut().zip(&dy).zip(scale) {
                            *d += v * s;
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (m, p) = nodes[a.0].value.dims2()?;
                    let q = nodes[b.0].value.cols();
                    if let Some(da) = slot(&mut g, nodes, *a) {
                        for i in 0..m {
                            add_into(&mut da[i * p..(i + 1) * p], &dy[i * (p + q)..i * (p + q) + p]);
                        }
                    }
                    if let Some(db) = slot(&mut g, nodes, *b) {
                        for i in 0..m {
                            add_into(
                                &mut db[i * q..(i + 1) * q],
                                &dy[i * (p + q) + p..(i + 1) * (p + q)],
                            );
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        if let Some(dp) = slot(&mut g, nodes, *p) {
                            add_into(dp, &dy[off..off + len]);
                        }
                        off += len;
                    }
                }
                Op::SelectRows { x, rows } => {
                    let n = nodes[x.0].value.cols();
                    if let Some(dx) = slot(&mut g, nodes, *x) {
                        for (r, &src) in rows.iter().enumerate() {
                            add_into(&mut dx[src * n..(src + 1) * n], &dy[r * n..(r + 1) * n]);
                        }
                    }
                }
                Op::MeanRows(x) => {
                    let (m, n) = nodes[x.0].value.dims2()?;
                    if let Some(dx) = slot(&mut g, nodes, *x) {
                        for i in 0..m {
                            for j in 0..n {
                                dx[i * n + j] += dy[j] / m as f64;
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(dx) = slot(&mut g, nodes, *x) {
                        dx.iter_mut().for_each(|d| *d += dy[0]);
                    }
                }
                Op::Mean(x) => {
                    if let Some(dx) = slot(&mut g, nodes, *x) {
                        let c = dy[0] / dx.len() as f64;
                        dx.iter_mut().for_each(|d| *d += c);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let n = nodes[logits.0].value.cols();
                    let m = targets.len() as f64;
                    if let Some(dl) = slot(&mut g, nodes, *logits) {
                        let c = dy[0] / m;
                        for (i, &t) in targets.iter().enumerate() {
                            for j in 0..n {
                                let onehot = if j == t { 1.0 } else { 0.0 };
                                dl[i * n + j] += c * (probs[i * n + j] - onehot);
                            }
                        }
                    }
                }
            }
        }
        if !grads.is_finite() || self.leaf_grads.values().any(|t| !t.is_finite()) {
            return Err(NumError::NonFinite("backward"));
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn slot<'g>(g: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'g mut [f64]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(g[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}
