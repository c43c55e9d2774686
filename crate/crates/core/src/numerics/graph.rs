//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in evaluation
//! order. Values are computed eagerly; [`Graph::backward`] walks the tape in
//! reverse and accumulates vector-Jacobian products.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Row(Var, usize),
    MaxOverRows(Var, Vec<usize>),
    MaxOverCols(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    Embedding(Var, Vec<usize>),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    AvgPool {
        x: Var,
        c: usize,
        h: usize,
        w: usize,
        p: usize,
    },
    Reshape(Var),
    Dropout(Var, Vec<f64>),
    CrossEntropy(Var, usize, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of a forward computation.
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    training: bool,
    rng: Option<ChaCha8Rng>,
}

/// Gradients of a scalar with respect to every recorded node.
pub struct NodeGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl NodeGrads {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Graph {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_vars: Vec::new(),
            training: false,
            rng: None,
        }
    }

    /// Training-mode graph drawing dropout masks from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Graph {
            nodes: Vec::new(),
            param_vars: Vec::new(),
            training: true,
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
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

    /// Hash of every branch taken by non-smooth operations: which relu
    /// inputs were positive and which entries won each max. Two evaluations
    /// with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(a) => {
                    i.hash(&mut h);
                    for &v in self.nodes[a.0].value.data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxOverRows(_, arg) | Op::MaxOverCols(_, arg) => {
                    i.hash(&mut h);
                    arg.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Bind a parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return *v;
        }
        let var = self.push(store.value(id).clone(), Op::Param);
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(var);
        var
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n, k2) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul_nt: {:?} x {:?}^T",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(ta.data(), tb.data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNT(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = kernels::transpose(t.data(), t.rows(), t.cols());
        let value = Tensor::matrix(t.cols(), t.rows(), out).expect("transpose shape");
        self.push(value, Op::Transpose(a))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// `x[r, c] + v[c]`, broadcasting `v` over rows.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (tx, tv) = (self.value(x), self.value(v));
        let c = tx.cols();
        if tv.len() != c {
            return Err(Error::dim(format!(
                "add_row: {:?} + {:?}",
                tx.shape(),
                tv.shape()
            )));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(tv.data()).for_each(|(o, b)| *o += b);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::AddRow(x, v)))
    }

    /// `x[r, c] + v[r]`, broadcasting `v` over columns.
    pub fn add_col(&mut self, x: Var, v: Var) -> Result<Var> {
        let (tx, tv) = (self.value(x), self.value(v));
        let (r, c) = (tx.rows(), tx.cols());
        if tv.len() != r {
            return Err(Error::dim(format!(
                "add_col: {:?} + {:?}",
                tx.shape(),
                tv.shape()
            )));
        }
        let mut out = tx.data().to_vec();
        for (row, b) in out.chunks_mut(c).zip(tv.data()) {
            row.iter_mut().for_each(|o| *o += b);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::AddCol(x, v)))
    }

    /// `x[r, c] * v[c]`, broadcasting `v` over rows.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (tx, tv) = (self.value(x), self.value(v));
        let c = tx.cols();
        if tv.len() != c {
            return Err(Error::dim(format!(
                "mul_row: {:?} * {:?}",
                tx.shape(),
                tv.shape()
            )));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(tv.data()).for_each(|(o, b)| *o *= b);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::MulRow(x, v)))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| f(*x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, op)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        self.map(a, Op::Shift(a), |x| x + offset)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), kernels::sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.cols() == 0 {
            return Err(Error::dim("softmax over an empty row"));
        }
        let mut out = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            out.extend(kernels::softmax(t.row(r)));
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::SoftmaxRows(a)))
    }

    /// Row-wise layer normalization followed by `gain * n + bias`.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.cols();
        if tg.len() != c || tb.len() != c {
            return Err(Error::dim(format!(
                "layer_norm: input {:?}, gain {:?}, bias {:?}",
                tx.shape(),
                tg.shape(),
                tb.shape()
            )));
        }
        let mut normalized = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.len());
        for r in 0..tx.rows() {
            let (n, s) = kernels::normalize(tx.row(r), eps);
            for ((nv, g), b) in n.iter().zip(tg.data()).zip(tb.data()) {
                out.push(nv * g + b);
            }
            normalized.extend(n);
            inv_std.push(s);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNormRows {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    /// Concatenate along columns; all inputs share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::dim("concat_cols: row counts differ"));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        Ok(self.push(
            Tensor::matrix(rows, total, out)?,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Stack single-row inputs into a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::dim("stack_rows: no rows"));
        }
        let c = self.value(rows[0]).len();
        let mut out = Vec::with_capacity(rows.len() * c);
        for r in rows {
            let t = self.value(*r);
            if t.len() != c {
                return Err(Error::dim("stack_rows: row lengths differ"));
            }
            out.extend_from_slice(t.data());
        }
        Ok(self.push(
            Tensor::matrix(rows.len(), c, out)?,
            Op::StackRows(rows.to_vec()),
        ))
    }

    /// Row `i` as a `1 x c` matrix.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let t = self.value(x);
        if i >= t.rows() {
            return Err(Error::dim(format!("row {i} of {:?}", t.shape())));
        }
        let value = Tensor::matrix(1, t.cols(), t.row(i).to_vec())?;
        Ok(self.push(value, Op::Row(x, i)))
    }

    /// Column-wise maximum (`1 x c`). Ties go to the lowest row index.
    pub fn max_over_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if r == 0 {
            return Err(Error::dim("max over zero rows"));
        }
        let mut out = vec![f64::NEG_INFINITY; c];
        let mut arg = vec![0usize; c];
        for i in 0..r {
            for (j, &v) in t.row(i).iter().enumerate() {
                if v > out[j] {
                    out[j] = v;
                    arg[j] = i;
                }
            }
        }
        Ok(self.push(Tensor::matrix(1, c, out)?, Op::MaxOverRows(x, arg)))
    }

    /// Row-wise maximum (`r x 1`). Ties go to the lowest column index.
    pub fn max_over_cols(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if c == 0 {
            return Err(Error::dim("max over zero columns"));
        }
        let mut out = Vec::with_capacity(r);
        let mut arg = Vec::with_capacity(r);
        for i in 0..r {
            let (j, v) = kernels::argmax(t.row(i));
            out.push(v);
            arg.push(j);
        }
        Ok(self.push(Tensor::matrix(r, 1, out)?, Op::MaxOverCols(x, arg)))
    }

    /// Mean over rows (`1 x c`).
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if r == 0 {
            return Err(Error::dim("mean over zero rows"));
        }
        let mut out = vec![0.0; c];
        for i in 0..r {
            out.iter_mut().zip(t.row(i)).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        Ok(self.push(Tensor::matrix(1, c, out)?, Op::MeanRows(x)))
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Gather rows of `table` by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::dim(format!("token id {id} outside vocabulary of {v}")));
            }
            out.extend_from_slice(t.row(id));
        }
        Ok(self.push(
            Tensor::matrix(ids.len(), d, out)?,
            Op::Embedding(table, ids.to_vec()),
        ))
    }

    /// 2-D convolution of `x [c_in, h, w]` with `w [c_out, c_in, k, k]` plus bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || tb.len() != ws[0] {
            return Err(Error::dim(format!(
                "conv2d: input {xs:?}, kernel {ws:?}, bias {:?}",
                tb.shape()
            )));
        }
        let k = ws[2];
        if xs[1] + 2 * pad < k || xs[2] + 2 * pad < k || stride == 0 {
            return Err(Error::dim("conv2d: kernel larger than padded input"));
        }
        let geom = ConvGeom {
            c_in: xs[0],
            h: xs[1],
            w: xs[2],
            c_out: ws[0],
            k,
            stride,
            pad,
            h_out: (xs[1] + 2 * pad - k) / stride + 1,
            w_out: (xs[2] + 2 * pad - k) / stride + 1,
        };
        let cols = kernels::im2col(tx.data(), geom.c_in, geom.h, geom.w, k, stride, pad, geom.h_out, geom.w_out);
        let hw = geom.h_out * geom.w_out;
        let ck = geom.c_in * k * k;
        let mut out = vec![0.0; geom.c_out * hw];
        for (c, row) in out.chunks_mut(hw).enumerate() {
            row.iter_mut().for_each(|o| *o = tb.data()[c]);
        }
        gemm_nn(tw.data(), &cols, &mut out, geom.c_out, ck, hw);
        let value = Tensor::new(vec![geom.c_out, geom.h_out, geom.w_out], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }))
    }

    /// Adaptive average pooling of `x [c, h, w]` down to `[c, p, p]`.
    pub fn adaptive_avg_pool(&mut self, x: Var, p: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 3 || p == 0 || p > s[1] || p > s[2] {
            return Err(Error::dim(format!("adaptive pool of {s:?} to {p}x{p}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(c * p * p);
        for ch in 0..c {
            let plane = &t.data()[ch * h * w..(ch + 1) * h * w];
            for i in 0..p {
                let (r0, r1) = kernels::pool_window(i, h, p);
                for j in 0..p {
                    let (c0, c1) = kernels::pool_window(j, w, p);
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        acc += plane[r * w + c0..r * w + c1].iter().sum::<f64>();
                    }
                    out.push(acc / ((r1 - r0) * (c1 - c0)) as f64);
                }
            }
        }
        let value = Tensor::new(vec![c, p, p], out)?;
        Ok(self.push(value, Op::AvgPool { x, c, h, w, p }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Inverted dropout; the identity outside training mode.
    pub fn dropout(&mut self, x: Var, prob: f64) -> Var {
        if !self.training || prob <= 0.0 {
            return x;
        }
        let keep = 1.0 - prob;
        let n = self.value(x).len();
        let rng = self.rng.as_mut().expect("training graph has an rng");
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Dropout(x, mask))
    }

    /// `-log softmax(logits)[label]` for a single row of logits.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let t = self.value(logits);
        if t.rows() != 1 {
            return Err(Error::dim("cross_entropy expects one row of logits"));
        }
        if label >= t.cols() {
            return Err(Error::dim(format!(
                "label {label} outside {} classes",
                t.cols()
            )));
        }
        let probs = kernels::softmax(t.data());
        let loss = kernels::log_sum_exp(t.data()) - t.data()[label];
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy(logits, label, probs)))
    }

    /// Gradients of the scalar `loss` with respect to the bound parameters.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let grads = self.backward_all(loss)?;
        let mut out = Gradients::new(self.param_vars.len());
        for (i, v) in self.param_vars.iter().enumerate() {
            if let Some(g) = v.and_then(|v| grads.get(v)) {
                out.accumulate(ParamId(i), g);
            }
        }
        Ok(out)
    }

    /// Gradients of the scalar `loss` with respect to every node it depends on.
    pub fn backward_all(&self, loss: Var) -> Result<NodeGrads> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    gemm_nt(&g, tb.data(), acc(&mut grads, *a, m * k), m, n, k);
                    gemm_tn(ta.data(), &g, acc(&mut grads, *b, k * n), m, k, n);
                }
                Op::MatMulNT(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                    gemm_nn(&g, tb.data(), acc(&mut grads, *a, m * k), m, n, k);
                    gemm_tn(&g, ta.data(), acc(&mut grads, *b, n * k), m, n, k);
                }
                Op::Transpose(a) => {
                    // y is [c, r]; g has the same layout
                    let gt = kernels::transpose(&g, y.rows(), y.cols());
                    add_into(acc(&mut grads, *a, gt.len()), &gt);
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    add_into(acc(&mut grads, *b, g.len()), &g);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    let gb = acc(&mut grads, *b, g.len());
                    gb.iter_mut().zip(&g).for_each(|(o, v)| *o -= v);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                    let ga = acc(&mut grads, *a, g.len());
                    for ((o, gv), bv) in ga.iter_mut().zip(&g).zip(tb) {
                        *o += gv * bv;
                    }
                    let gb = acc(&mut grads, *b, g.len());
                    for ((o, gv), av) in gb.iter_mut().zip(&g).zip(ta) {
                        *o += gv * av;
                    }
                }
                Op::AddRow(x, v) => {
                    let c = y.cols();
                    add_into(acc(&mut grads, *x, g.len()), &g);
                    let gv = acc(&mut grads, *v, c);
                    for row in g.chunks(c) {
                        add_into(gv, row);
                    }
                }
                Op::AddCol(x, v) => {
                    let (r, c) = (y.rows(), y.cols());
                    add_into(acc(&mut grads, *x, g.len()), &g);
                    let gv = acc(&mut grads, *v, r);
                    for (o, row) in gv.iter_mut().zip(g.chunks(c)) {
                        *o += row.iter().sum::<f64>();
                    }
                }
                Op::MulRow(x, v) => {
                    let c = y.cols();
                    let (tx, tv) = (self.value(*x).data(), self.value(*v).data());
                    let gx = acc(&mut grads, *x, g.len());
                    for (grow, orow) in g.chunks(c).zip(gx.chunks_mut(c)) {
                        for ((o, gv), vv) in orow.iter_mut().zip(grow).zip(tv) {
                            *o += gv * vv;
                        }
                    }
                    let gvv = acc(&mut grads, *v, c);
                    for (grow, xrow) in g.chunks(c).zip(tx.chunks(c)) {
                        for ((o, gv), xv) in gvv.iter_mut().zip(grow).zip(xrow) {
                            *o += gv * xv;
                        }
                    }
                }
                Op::Scale(a, f) => {
                    let ga = acc(&mut grads, *a, g.len());
                    ga.iter_mut().zip(&g).for_each(|(o, v)| *o += f * v);
                }
                Op::Shift(a) | Op::Reshape(a) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                }
                Op::Sigmoid(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for ((o, gv), yv) in ga.iter_mut().zip(&g).zip(y.data()) {
                        *o += gv * yv * (1.0 - yv);
                    }
                }
                Op::Tanh(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for ((o, gv), yv) in ga.iter_mut().zip(&g).zip(y.data()) {
                        *o += gv * (1.0 - yv * yv);
                    }
                }
                Op::Relu(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for ((o, gv), yv) in ga.iter_mut().zip(&g).zip(y.data()) {
                        if *yv > 0.0 {
                            *o += gv;
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let c = y.cols();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((grow, yrow), orow) in g.chunks(c).zip(y.data().chunks(c)).zip(ga.chunks_mut(c)) {
                        let inner: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yv * (gv - inner);
                        }
                    }
                }
                Op::LayerNormRows {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let c = y.cols();
                    let tg = self.value(*gain).data().to_vec();
                    {
                        let gg = acc(&mut grads, *gain, c);
                        for (grow, nrow) in g.chunks(c).zip(normalized.chunks(c)) {
                            for ((o, gv), nv) in gg.iter_mut().zip(grow).zip(nrow) {
                                *o += gv * nv;
                            }
                        }
                    }
                    {
                        let gb = acc(&mut grads, *bias, c);
                        for grow in g.chunks(c) {
                            add_into(gb, grow);
                        }
                    }
                    let gx = acc(&mut grads, *x, g.len());
                    for (((grow, nrow), orow), s) in g
                        .chunks(c)
                        .zip(normalized.chunks(c))
                        .zip(gx.chunks_mut(c))
                        .zip(inv_std)
                    {
                        let dn: Vec<f64> = grow.iter().zip(&tg).map(|(a, b)| a * b).collect();
                        let mean_dn = dn.iter().sum::<f64>() / c as f64;
                        let mean_dn_n = dn.iter().zip(nrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for ((o, d), nv) in orow.iter_mut().zip(&dn).zip(nrow) {
                            *o += s * (d - mean_dn - nv * mean_dn_n);
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = y.rows();
                    let total = y.cols();
                    let mut offset = 0;
                    for p in parts {
                        let c = self.value(*p).cols();
                        let gp = acc(&mut grads, *p, rows * c);
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * c..(r + 1) * c],
                                &g[r * total + offset..r * total + offset + c],
                            );
                        }
                        offset += c;
                    }
                }
                Op::StackRows(rows) => {
                    let c = y.cols();
                    for (r, v) in rows.iter().enumerate() {
                        add_into(acc(&mut grads, *v, c), &g[r * c..(r + 1) * c]);
                    }
                }
                Op::Row(x, i) => {
                    let tx = self.value(*x);
                    let c = tx.cols();
                    let gx = acc(&mut grads, *x, tx.len());
                    add_into(&mut gx[i * c..(i + 1) * c], &g);
                }
                Op::MaxOverRows(x, arg) => {
                    let tx = self.value(*x);
                    let c = tx.cols();
                    let gx = acc(&mut grads, *x, tx.len());
                    for (j, &r) in arg.iter().enumerate() {
                        gx[r * c + j] += g[j];
                    }
                }
                Op::MaxOverCols(x, arg) => {
                    let tx = self.value(*x);
                    let c = tx.cols();
                    let gx = acc(&mut grads, *x, tx.len());
                    for (r, &j) in arg.iter().enumerate() {
                        gx[r * c + j] += g[r];
                    }
                }
                Op::MeanRows(x) => {
                    let tx = self.value(*x);
                    let (r, c) = (tx.rows(), tx.cols());
                    let gx = acc(&mut grads, *x, tx.len());
                    for row in gx.chunks_mut(c) {
                        for (o, gv) in row.iter_mut().zip(&g) {
                            *o += gv / r as f64;
                        }
                    }
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    acc(&mut grads, *x, n).iter_mut().for_each(|o| *o += g[0]);
                }
                Op::Embedding(table, ids) => {
                    let tt = self.value(*table);
                    let d = tt.cols();
                    let gt = acc(&mut grads, *table, tt.len());
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
                Op::Conv2d { x, w, b, geom, cols } => {
                    let hw = geom.h_out * geom.w_out;
                    let ck = geom.c_in * geom.k * geom.k;
                    {
                        let gb = acc(&mut grads, *b, geom.c_out);
                        for (o, row) in gb.iter_mut().zip(g.chunks(hw)) {
                            *o += row.iter().sum::<f64>();
                        }
                    }
                    gemm_nt(&g, cols, acc(&mut grads, *w, geom.c_out * ck), geom.c_out, hw, ck);
                    if self.needs_grad(*x) {
                        let mut dcols = vec![0.0; ck * hw];
                        gemm_tn(self.value(*w).data(), &g, &mut dcols, geom.c_out, ck, hw);
                        let gx = acc(&mut grads, *x, geom.c_in * geom.h * geom.w);
                        kernels::col2im(
                            &dcols, gx, geom.c_in, geom.h, geom.w, geom.k, geom.stride, geom.pad,
                            geom.h_out, geom.w_out,
                        );
                    }
                }
                Op::AvgPool { x, c, h, w, p } => {
                    let (c, h, w, p) = (*c, *h, *w, *p);
                    let gx = acc(&mut grads, *x, c * h * w);
                    for ch in 0..c {
                        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
                        for i in 0..p {
                            let (r0, r1) = kernels::pool_window(i, h, p);
                            for j in 0..p {
                                let (c0, c1) = kernels::pool_window(j, w, p);
                                let share = g[ch * p * p + i * p + j] / ((r1 - r0) * (c1 - c0)) as f64;
                                for r in r0..r1 {
                                    plane[r * w + c0..r * w + c1].iter_mut().for_each(|o| *o += share);
                                }
                            }
                        }
                    }
                }
                Op::Dropout(x, mask) => {
                    let gx = acc(&mut grads, *x, g.len());
                    for ((o, gv), m) in gx.iter_mut().zip(&g).zip(mask) {
                        *o += gv * m;
                    }
                }
                Op::CrossEntropy(logits, label, probs) => {
                    let gl = acc(&mut grads, *logits, probs.len());
                    for (j, (o, p)) in gl.iter_mut().zip(probs).enumerate() {
                        let target = if j == *label { 1.0 } else { 0.0 };
                        *o += g[0] * (p - target);
                    }
                }
            }
        }
        Ok(NodeGrads { grads })
    }

    /// Whether any parameter or leaf can receive gradient through `v`.
    /// Raw image inputs are constants, so their gradient is skipped.
    fn needs_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Leaf)
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
