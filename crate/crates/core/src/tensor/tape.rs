use std::collections::HashMap;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param { store: u64, id: ParamId },
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    ScaleRows(usize, usize),
    Column(usize, usize),
    ConcatLastDim(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    PickLastDim(usize, Vec<usize>),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm { x: usize, inv_std: Vec<f64> },
    Sigmoid(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    LogSumExp(usize),
    ScalarFn { input: usize, jacobian: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only record of a forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_cache: HashMap<(u64, usize), usize>,
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.last_dim())
}

fn drop_last(shape: &[usize]) -> Vec<usize> {
    if shape.is_empty() {
        Vec::new()
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
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

    /// Drops every node and saved activation. Parameter stores are untouched.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_cache.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn t(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn non_empty(&self, kind: &'static str, v: Var) -> Result<()> {
        if self.t(v).numel() == 0 {
            return Err(Error::domain(kind, "empty tensor"));
        }
        Ok(())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a parameter as a leaf. Repeated calls for the same store and
    /// id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.0);
        if let Some(&n) = self.param_cache.get(&key) {
            return Var(n);
        }
        let p = store.param(id);
        let v = self.push(
            p.value.clone(),
            Op::Param {
                store: store.uid(),
                id,
            },
            p.trainable,
        );
        self.param_cache.insert(key, v.0);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.t(v)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.t(v).data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.t(v).shape()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.t(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a node, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- forward primitives -------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.t(a), self.t(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::dim(
                "matmul",
                format!("lhs {:?} (axis 1) vs rhs {:?} (axis 0)", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.t(a);
        if ta.rank() != 2 {
            return Err(Error::dim("transpose", format!("expected rank 2, got {:?}", ta.shape())));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let d = ta.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.t(a), self.t(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a.0, b.0), rg))
    }

    /// Adds a `[n]` vector to every last-axis row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.t(x), self.t(b));
        if tb.rank() != 1 || tb.numel() != tx.last_dim() {
            return Err(Error::dim("add_row", format!("{:?} vs row {:?}", tx.shape(), tb.shape())));
        }
        let n = tb.numel();
        let bd = tb.data();
        let out = tx.data().iter().enumerate().map(|(i, v)| v + bd[i % n]).collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x.0, b.0]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(x.0, b.0), rg))
    }

    /// Multiplies every last-axis row of `x` elementwise by a `[n]` vector.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (tx, tg) = (self.t(x), self.t(g));
        if tg.rank() != 1 || tg.numel() != tx.last_dim() {
            return Err(Error::dim("mul_row", format!("{:?} vs row {:?}", tx.shape(), tg.shape())));
        }
        let n = tg.numel();
        let gd = tg.data();
        let out = tx.data().iter().enumerate().map(|(i, v)| v * gd[i % n]).collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x.0, g.0]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MulRow(x.0, g.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.t(a), self.t(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ta = self.t(a);
        let out = ta.data().iter().map(|x| x * factor).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale(a.0, factor), rg))
    }

    /// Scales row `r` of a `[T, n]` tensor by `s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.t(x), self.t(s));
        let (rows, cols) = rows_cols(tx);
        if ts.rank() != 1 || ts.numel() != rows {
            return Err(Error::dim(
                "scale_rows",
                format!("{} rows vs scale {:?}", rows, ts.shape()),
            ));
        }
        let sd = ts.data();
        let out = tx.data().iter().enumerate().map(|(i, v)| v * sd[i / cols]).collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x.0, s.0]);
        Ok(self.push(Tensor::new(shape, out)?, Op::ScaleRows(x.0, s.0), rg))
    }

    /// Column `c` of a `[T, n]` tensor as a `[T]` vector.
    pub fn column(&mut self, x: Var, c: usize) -> Result<Var> {
        let tx = self.t(x);
        let (rows, cols) = rows_cols(tx);
        if tx.rank() != 2 || c >= cols {
            return Err(Error::dim("column", format!("column {c} of {:?}", tx.shape())));
        }
        let out = (0..rows).map(|r| tx.data()[r * cols + c]).collect();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(vec![rows], out)?, Op::Column(x.0, c), rg))
    }

    pub fn concat_last_dim(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::domain("concat_last_dim", "no inputs"));
        }
        let lead = drop_last(self.t(parts[0]).shape());
        let rows = self.t(parts[0]).rows();
        for &p in parts {
            if drop_last(self.t(p).shape()) != lead {
                return Err(Error::dim(
                    "concat_last_dim",
                    format!("leading axes {:?} vs {:?}", lead, self.t(p).shape()),
                ));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.t(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.t(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatLastDim(ids), rg))
    }

    /// Stacks `[t_i, n]` matrices along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::domain("concat_rows", "no inputs"));
        }
        let width = self.t(parts[0]).last_dim();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.t(p);
            if tp.rank() != 2 || tp.last_dim() != width {
                return Err(Error::dim(
                    "concat_rows",
                    format!("width {} vs {:?}", width, tp.shape()),
                ));
            }
            rows += tp.rows();
            out.extend_from_slice(tp.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::new(vec![rows, width], out)?, Op::ConcatRows(ids), rg))
    }

    /// Selects rows of a `[R, n]` table; indices may repeat.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.t(table);
        if tt.rank() != 2 {
            return Err(Error::dim("gather_rows", format!("table {:?}", tt.shape())));
        }
        let (rows, n) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::dim("gather_rows", format!("row {bad} out of {rows}")));
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(tt.row(i));
        }
        let rg = self.rg(&[table.0]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), n], out)?,
            Op::GatherRows(table.0, idx.to_vec()),
            rg,
        ))
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// `out[r] = x[r, idx[r]]` for a `[T, V]` tensor.
    pub fn pick_last_dim(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.t(x);
        let (rows, cols) = rows_cols(tx);
        if tx.rank() != 2 || idx.len() != rows || idx.iter().any(|&i| i >= cols) {
            return Err(Error::dim(
                "pick_last_dim",
                format!("{} indices into {:?}", idx.len(), tx.shape()),
            ));
        }
        let out = idx.iter().enumerate().map(|(r, &c)| tx.data()[r * cols + c]).collect();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(vec![rows], out)?, Op::PickLastDim(x.0, idx.to_vec()), rg))
    }

    pub fn softmax_last_dim(&mut self, x: Var) -> Result<Var> {
        self.non_empty("softmax_last_dim", x)?;
        let tx = self.t(x);
        let (rows, _) = rows_cols(tx);
        let mut out = Vec::with_capacity(tx.numel());
        for r in 0..rows {
            let row = tx.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.into_iter().map(|v| v / s));
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x.0), rg))
    }

    pub fn log_softmax_last_dim(&mut self, x: Var) -> Result<Var> {
        self.non_empty("log_softmax_last_dim", x)?;
        let tx = self.t(x);
        let (rows, _) = rows_cols(tx);
        let mut out = Vec::with_capacity(tx.numel());
        for r in 0..rows {
            let row = tx.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax(x.0), rg))
    }

    /// Normalizes each last-axis row to zero mean and unit variance (no affine).
    pub fn layer_norm_last_dim(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::domain("layer_norm_last_dim", format!("epsilon {eps} must be > 0")));
        }
        self.non_empty("layer_norm_last_dim", x)?;
        let tx = self.t(x);
        let (rows, cols) = rows_cols(tx);
        let mut out = Vec::with_capacity(tx.numel());
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|v| (v - mean) * is));
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x: x.0, inv_std }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let tx = self.t(x);
        let out = tx
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sigmoid(x.0), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.t(x);
        let out = tx.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Relu(x.0), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.non_empty("sum", x)?;
        let s = self.t(x).data().iter().sum();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x.0), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.non_empty("mean", x)?;
        let tx = self.t(x);
        let s = tx.data().iter().sum::<f64>() / tx.numel() as f64;
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x.0), rg))
    }

    pub fn logsumexp_last_dim(&mut self, x: Var) -> Result<Var> {
        self.non_empty("logsumexp_last_dim", x)?;
        let tx = self.t(x);
        let (rows, _) = rows_cols(tx);
        let out = (0..rows)
            .map(|r| {
                let row = tx.row(r);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let shape = drop_last(tx.shape());
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSumExp(x.0), rg))
    }

    /// Records a scalar-valued function of `input` whose full gradient was
    /// computed during the forward pass.
    pub fn scalar_fn(&mut self, input: Var, value: f64, jacobian: Vec<f64>) -> Result<Var> {
        if jacobian.len() != self.t(input).numel() {
            return Err(Error::dim(
                "scalar_fn",
                format!("jacobian {} vs input {}", jacobian.len(), self.t(input).numel()),
            ));
        }
        let rg = self.rg(&[input.0]);
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn { input: input.0, jacobian }, rg))
    }

    // ---- composites ---------------------------------------------------------

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// `log(sigmoid(x))` for a scalar, as `-logsumexp([0, -x])`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        if self.t(x).numel() != 1 {
            return Err(Error::dim("log_sigmoid", format!("scalar expected, got {:?}", self.shape(x))));
        }
        // Rank-0 scalars become [1] through a single-part concat.
        let x1 = if self.t(x).rank() == 1 {
            x
        } else {
            self.concat_last_dim(&[x])?
        };
        let zero = self.constant(Tensor::zeros(self.t(x1).shape()));
        let neg = self.scale(x1, -1.0)?;
        let both = self.concat_last_dim(&[zero, neg])?;
        let lse = self.logsumexp_last_dim(both)?;
        self.scale(lse, -1.0)
    }

    // ---- backward -----------------------------------------------------------

    fn adjoints(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.t(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(adj)
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let want = |j: usize| self.nodes[j].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if want(*a) {
                    let mut da = vec![0.0; m * k];
                    let bd = tb.data();
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            da[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    add_into(&mut adj[*a], &da);
                }
                if want(*b) {
                    let mut db = vec![0.0; k * n];
                    let ad = ta.data();
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = ad[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let dst = &mut db[p * n..(p + 1) * n];
                            for (d, x) in dst.iter_mut().zip(grow) {
                                *d += av * x;
                            }
                        }
                    }
                    add_into(&mut adj[*b], &db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        da[c * m + r] = g[r * n + c];
                    }
                }
                add_into(&mut adj[*a], &da);
            }
            Op::Add(a, b) => {
                if want(*a) {
                    add_into(&mut adj[*a], g);
                }
                if want(*b) {
                    add_into(&mut adj[*b], g);
                }
            }
            Op::AddRow(x, b) => {
                if want(*x) {
                    add_into(&mut adj[*x], g);
                }
                if want(*b) {
                    let n = self.nodes[*b].value.numel();
                    let mut db = vec![0.0; n];
                    for (k, v) in g.iter().enumerate() {
                        db[k % n] += v;
                    }
                    add_into(&mut adj[*b], &db);
                }
            }
            Op::MulRow(x, gv) => {
                let (tx, tg) = (&self.nodes[*x].value, &self.nodes[*gv].value);
                let n = tg.numel();
                if want(*x) {
                    let dx: Vec<f64> =
                        g.iter().enumerate().map(|(k, v)| v * tg.data()[k % n]).collect();
                    add_into(&mut adj[*x], &dx);
                }
                if want(*gv) {
                    let mut dg = vec![0.0; n];
                    for (k, v) in g.iter().enumerate() {
                        dg[k % n] += v * tx.data()[k];
                    }
                    add_into(&mut adj[*gv], &dg);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if want(*a) {
                    let da: Vec<f64> = g.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    add_into(&mut adj[*a], &da);
                }
                if want(*b) {
                    let db: Vec<f64> = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    add_into(&mut adj[*b], &db);
                }
            }
            Op::Scale(a, f) => {
                let da: Vec<f64> = g.iter().map(|x| x * f).collect();
                add_into(&mut adj[*a], &da);
            }
            Op::ScaleRows(x, s) => {
                let (tx, ts) = (&self.nodes[*x].value, &self.nodes[*s].value);
                let cols = tx.last_dim();
                if want(*x) {
                    let dx: Vec<f64> =
                        g.iter().enumerate().map(|(k, v)| v * ts.data()[k / cols]).collect();
                    add_into(&mut adj[*x], &dx);
                }
                if want(*s) {
                    let mut ds = vec![0.0; ts.numel()];
                    for (k, v) in g.iter().enumerate() {
                        ds[k / cols] += v * tx.data()[k];
                    }
                    add_into(&mut adj[*s], &ds);
                }
            }
            Op::Column(x, c) => {
                let tx = &self.nodes[*x].value;
                let cols = tx.last_dim();
                let mut dx = vec![0.0; tx.numel()];
                for (r, v) in g.iter().enumerate() {
                    dx[r * cols + c] = *v;
                }
                add_into(&mut adj[*x], &dx);
            }
            Op::ConcatLastDim(ids) => {
                let total = out.last_dim();
                let rows = out.rows();
                let mut offset = 0;
                for &p in ids {
                    let w = self.nodes[p].value.last_dim();
                    if want(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        add_into(&mut adj[p], &dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(ids) => {
                let mut offset = 0;
                for &p in ids {
                    let n = self.nodes[p].value.numel();
                    if want(p) {
                        add_into(&mut adj[p], &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::GatherRows(t, idx) => {
                let tt = &self.nodes[*t].value;
                let n = tt.last_dim();
                let mut dt = vec![0.0; tt.numel()];
                for (k, &row) in idx.iter().enumerate() {
                    for c in 0..n {
                        dt[row * n + c] += g[k * n + c];
                    }
                }
                add_into(&mut adj[*t], &dt);
            }
            Op::PickLastDim(x, idx) => {
                let tx = &self.nodes[*x].value;
                let cols = tx.last_dim();
                let mut dx = vec![0.0; tx.numel()];
                for (r, &c) in idx.iter().enumerate() {
                    dx[r * cols + c] = g[r];
                }
                add_into(&mut adj[*x], &dx);
            }
            Op::Softmax(x) => {
                let cols = out.last_dim();
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for r in 0..out.rows() {
                    let s = r * cols..(r + 1) * cols;
                    let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                    for k in s {
                        dx[k] = y[k] * (g[k] - dot);
                    }
                }
                add_into(&mut adj[*x], &dx);
            }
            Op::LogSoftmax(x) => {
                let cols = out.last_dim();
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for r in 0..out.rows() {
                    let s = r * cols..(r + 1) * cols;
                    let gs: f64 = g[s.clone()].iter().sum();
                    for k in s {
                        dx[k] = g[k] - y[k].exp() * gs;
                    }
                }
                add_into(&mut adj[*x], &dx);
            }
            Op::LayerNorm { x, inv_std } => {
                let cols = out.last_dim();
                let xhat = out.data();
                let mut dx = vec![0.0; xhat.len()];
                let nf = cols as f64;
                for (r, is) in inv_std.iter().enumerate() {
                    let s = r * cols..(r + 1) * cols;
                    let mg: f64 = g[s.clone()].iter().sum::<f64>() / nf;
                    let mgx: f64 =
                        g[s.clone()].iter().zip(&xhat[s.clone()]).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for k in s {
                        dx[k] = is * (g[k] - mg - xhat[k] * mgx);
                    }
                }
                add_into(&mut adj[*x], &dx);
            }
            Op::Sigmoid(x) => {
                let dx: Vec<f64> =
                    g.iter().zip(out.data()).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                add_into(&mut adj[*x], &dx);
            }
            Op::Relu(x) => {
                let tx = &self.nodes[*x].value;
                let dx: Vec<f64> = g
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 })
                    .collect();
                add_into(&mut adj[*x], &dx);
            }
            Op::Sum(x) => {
                let n = self.nodes[*x].value.numel();
                add_into(&mut adj[*x], &vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[*x].value.numel();
                add_into(&mut adj[*x], &vec![g[0] / n as f64; n]);
            }
            Op::LogSumExp(x) => {
                let tx = &self.nodes[*x].value;
                let cols = tx.last_dim();
                let mut dx = vec![0.0; tx.numel()];
                for (r, lse) in out.data().iter().enumerate() {
                    for k in r * cols..(r + 1) * cols {
                        dx[k] = g[r] * (tx.data()[k] - lse).exp();
                    }
                }
                add_into(&mut adj[*x], &dx);
            }
            Op::ScalarFn { input, jacobian } => {
                let dx: Vec<f64> = jacobian.iter().map(|j| j * g[0]).collect();
                add_into(&mut adj[*input], &dx);
            }
        }
    }

    /// Propagates `d loss / d node` to every reachable node that requires a
    /// gradient and adds it to that node's stored gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let adj = self.adjoints(loss)?;
        for (i, a) in adj.into_iter().enumerate() {
            if let Some(a) = a {
                if self.nodes[i].requires_grad {
                    add_into(&mut self.nodes[i].grad, &a);
                }
            }
        }
        Ok(())
    }

    /// Like [`Tape::backward`], but parameter leaves registered from `store`
    /// accumulate into the store's gradient buffers instead of the tape.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let adj = self.adjoints(loss)?;
        let uid = store.uid();
        for (i, a) in adj.into_iter().enumerate() {
            let Some(a) = a else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match self.nodes[i].op {
                Op::Param { store: s, id } if s == uid => store.accumulate_grad(id, &a),
                _ => add_into(&mut self.nodes[i].grad, &a),
            }
        }
        Ok(())
    }
}
