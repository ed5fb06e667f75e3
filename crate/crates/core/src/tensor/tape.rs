//! Reverse-mode differentiation over a closed set of 2-D array operations.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! the tape by name from a borrowed [`ParamStore`]; [`Tape::backward`] walks
//! the record in reverse and returns gradients indexed by parameter.

use std::collections::HashMap;

use super::array::gemm;
use super::params::{Gradients, ParamId, ParamStore};
use super::Array;
use crate::error::{Error, Result};
use crate::kinematics::wrap_angle;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Tanh,
    Sigmoid,
    Gelu,
    Silu,
    Relu,
    Cos,
    Sin,
    Square,
    Softplus,
    WrapAngle,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    /// A frozen parameter; its value is read from the store.
    FrozenParam(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    SoftmaxRows(Var),
    LayerNormRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    BroadcastRows(Var),
    Sum(Var),
    Mean(Var),
    MeanGroups(Var, usize),
    MaxGroups(Var),
    Reshape(Var),
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
    // Op-specific saved data: inverse std per row for layer norm, argmax rows for max pooling.
    aux: Vec<f64>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-8;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Gelu => gelu(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::Cos => x.cos(),
            Unary::Sin => x.sin(),
            Unary::Square => x * x,
            Unary::Softplus => softplus(x),
            Unary::WrapAngle => wrap_angle(x),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn grad(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Gelu => gelu_grad(x),
            Unary::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Cos => -x.sin(),
            Unary::Sin => x.cos(),
            Unary::Square => 2.0 * x,
            Unary::Softplus => sigmoid(x),
            Unary::WrapAngle => 1.0,
        }
    }
}

/// Records one forward computation.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
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

    pub fn value(&self, v: Var) -> &Array {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) | Op::FrozenParam(id) => &self.params.by_id(id).value,
            _ => &node.value,
        }
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.push_aux(value, op, needs_grad, Vec::new())
    }

    fn push_aux(&mut self, value: Array, op: Op, needs_grad: bool, aux: Vec<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array::scalar(value))
    }

    /// Brings a named parameter onto the tape. Frozen parameters enter as constants.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let p = self.params.by_id(id);
        let v = if p.trainable {
            self.push(Array::zeros(0, 0), Op::Param(id), true)
        } else {
            self.push(Array::zeros(0, 0), Op::FrozenParam(id), false)
        };
        self.param_vars.insert(id, v);
        Ok(v)
    }

    /// Fails with the given context when `v` holds a non-finite entry.
    pub fn check_finite(&self, v: Var, context: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, &sa, &sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    fn row_broadcast(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr[0] != 1 || sr[1] != sa[1] {
            return Err(Error::shape(op, &sa, &sr));
        }
        Ok(())
    }

    /// `a + row` with `row` of shape `[1, cols]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        let cols = out.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += r[i % cols];
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    /// `a * row` with `row` of shape `[1, cols]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        let cols = out.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= r[i % cols];
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::MulRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    fn unary(&mut self, a: Var, f: Unary) -> Var {
        let out = self.value(a).map(|v| f.apply(v));
        let ng = self.ng(a);
        self.push(out, Op::Unary(a, f), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    /// Wraps angles into `(-PI, PI]`; the gradient passes through unchanged.
    pub fn wrap_angle(&mut self, a: Var) -> Var {
        self.unary(a, Unary::WrapAngle)
    }

    /// Row-wise softmax. Columns with `mask[c] == false` get probability zero.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let x = self.value(a);
        let cols = x.cols();
        if let Some(m) = mask {
            if m.len() != cols {
                return Err(Error::shape("softmax mask", &x.shape(), &[m.len()]));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::InvalidArgument("attention mask hides every key".into()));
            }
        }
        let keep = |c: usize| mask.map_or(true, |m| m[c]);
        let mut out = Array::zeros(x.rows(), cols);
        for r in 0..x.rows() {
            let row = x.row_slice(r);
            let mx = (0..cols)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in 0..cols {
                if keep(c) {
                    let e = (row[c] - mx).exp();
                    out.set(r, c, e);
                    total += e;
                }
            }
            for c in 0..cols {
                out.set(r, c, out.get(r, c) / total);
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::SoftmaxRows(a), ng))
    }

    /// Per-row standardization to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut out = Array::zeros(x.rows(), cols);
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row_slice(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for c in 0..cols {
                out.set(r, c, (row[c] - mean) * is);
            }
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push_aux(out, Op::LayerNormRows(a), ng, inv_std)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0])[0];
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Array::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::shape("concat_cols", &self.shape(parts[0]), &v.shape()));
            }
            for r in 0..rows {
                for c in 0..v.cols() {
                    out.set(r, offset + c, v.get(r, c));
                }
            }
            offset += v.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0])[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::shape("concat_rows", &self.shape(parts[0]), &v.shape()));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let out = Array::new(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.cols() {
            return Err(Error::shape("slice_cols", &x.shape(), &[start, len]));
        }
        let mut out = Array::zeros(x.rows(), len);
        for r in 0..x.rows() {
            for c in 0..len {
                out.set(r, c, x.get(r, start + c));
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceCols(a, start), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.rows() {
            return Err(Error::shape("slice_rows", &x.shape(), &[start, len]));
        }
        let cols = x.cols();
        let out = Array::new(len, cols, x.data()[start * cols..(start + len) * cols].to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceRows(a, start), ng))
    }

    /// Repeats a `[1, cols]` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != 1 {
            return Err(Error::shape("broadcast_rows", &x.shape(), &[1, x.cols()]));
        }
        let mut data = Vec::with_capacity(rows * x.cols());
        for _ in 0..rows {
            data.extend_from_slice(x.data());
        }
        let out = Array::new(rows, x.cols(), data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::BroadcastRows(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Array::scalar(x.sum() / x.len() as f64);
        let ng = self.ng(a);
        self.push(out, Op::Mean(a), ng)
    }

    fn check_groups(&self, op: &'static str, a: Var, group: usize) -> Result<()> {
        let s = self.shape(a);
        if group == 0 || s[0] % group != 0 {
            return Err(Error::shape(op, &s, &[group]));
        }
        Ok(())
    }

    /// Mean over consecutive blocks of `group` rows: `[g*n, c] -> [g, c]`.
    pub fn mean_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        self.check_groups("mean_groups", a, group)?;
        let x = self.value(a);
        let n = x.rows() / group;
        let mut out = Array::zeros(n, x.cols());
        for r in 0..x.rows() {
            for c in 0..x.cols() {
                let g = r / group;
                out.set(g, c, out.get(g, c) + x.get(r, c) / group as f64);
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::MeanGroups(a, group), ng))
    }

    /// Column-wise max over consecutive blocks of `group` rows.
    pub fn max_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        self.check_groups("max_groups", a, group)?;
        let x = self.value(a);
        let n = x.rows() / group;
        let mut out = Array::full(n, x.cols(), f64::NEG_INFINITY);
        let mut arg = vec![0.0; n * x.cols()];
        for r in 0..x.rows() {
            for c in 0..x.cols() {
                let g = r / group;
                if x.get(r, c) > out.get(g, c) {
                    out.set(g, c, x.get(r, c));
                    arg[g * x.cols() + c] = r as f64;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push_aux(out, Op::MaxGroups(a), ng, arg))
    }

    /// Reinterprets the row-major data under a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let x = self.value(a);
        if rows * cols != x.len() {
            return Err(Error::shape("reshape", &x.shape(), &[rows, cols]));
        }
        let out = Array::new(rows, cols, x.data().to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Accumulates `d loss / d param` for every trainable parameter on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls != [1, 1] {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {ls:?}"
            )));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients {
            entries: vec![None; self.params.len()],
        };
        grads[loss.0] = Some(Array::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: Array, grads: &mut [Option<Array>], out: &mut Gradients) {
        let mut acc = |v: Var, d: Array| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf | Op::FrozenParam(_) => {}
            Op::Param(id) => match &mut out.entries[id.0] {
                Some(e) => e.add_assign(&g),
                slot => *slot = Some(g),
            },
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut da = Array::zeros(va.rows(), va.cols());
                    gemm(&g, false, vb, true, &mut da, 0.0);
                    acc(*a, da);
                }
                if self.ng(*b) {
                    let mut db = Array::zeros(vb.rows(), vb.cols());
                    gemm(va, true, &g, false, &mut db, 0.0);
                    acc(*b, db);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Sub(a, b) => {
                acc(*b, g.scale(-1.0));
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*row) {
                    acc(*row, column_sums(&g));
                }
                acc(*a, g);
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row);
                let x = self.value(*a);
                let cols = g.cols();
                if self.ng(*a) {
                    let mut da = g.clone();
                    for (i, v) in da.data_mut().iter_mut().enumerate() {
                        *v *= r.data()[i % cols];
                    }
                    acc(*a, da);
                }
                if self.ng(*row) {
                    acc(*row, column_sums(&g.zip_map(x, |p, q| p * q)));
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::AddScalar(a) => acc(*a, g),
            Op::Unary(a, f) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut d = g;
                for ((dv, &xv), &yv) in d.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    *dv *= f.grad(xv, yv);
                }
                acc(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Array::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = (0..y.cols()).map(|c| g.get(r, c) * y.get(r, c)).sum();
                    for c in 0..y.cols() {
                        d.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                acc(*a, d);
            }
            Op::LayerNormRows(a) => {
                let y = &node.value;
                let cols = y.cols() as f64;
                let mut d = Array::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gr = g.row_slice(r);
                    let yr = y.row_slice(r);
                    let mean_g = gr.iter().sum::<f64>() / cols;
                    let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / cols;
                    for c in 0..y.cols() {
                        d.set(r, c, node.aux[r] * (gr[c] - mean_g - yr[c] * mean_gy));
                    }
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let s = self.shape(p);
                    if self.ng(p) {
                        let mut d = Array::zeros(s[0], s[1]);
                        for r in 0..s[0] {
                            for c in 0..s[1] {
                                d.set(r, c, g.get(r, offset + c));
                            }
                        }
                        acc(p, d);
                    }
                    offset += s[1];
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let s = self.shape(p);
                    if self.ng(p) {
                        let data = g.data()[offset * cols..(offset + s[0]) * cols].to_vec();
                        acc(p, Array::new(s[0], s[1], data).expect("concat_rows grad"));
                    }
                    offset += s[0];
                }
            }
            Op::SliceCols(a, start) => {
                let s = self.shape(*a);
                let mut d = Array::zeros(s[0], s[1]);
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        d.set(r, start + c, g.get(r, c));
                    }
                }
                acc(*a, d);
            }
            Op::SliceRows(a, start) => {
                let s = self.shape(*a);
                let mut d = Array::zeros(s[0], s[1]);
                d.data_mut()[start * s[1]..(start + g.rows()) * s[1]].copy_from_slice(g.data());
                acc(*a, d);
            }
            Op::BroadcastRows(a) => acc(*a, column_sums(&g)),
            Op::Sum(a) => {
                let s = self.shape(*a);
                acc(*a, Array::full(s[0], s[1], g.item()));
            }
            Op::Mean(a) => {
                let s = self.shape(*a);
                acc(*a, Array::full(s[0], s[1], g.item() / (s[0] * s[1]) as f64));
            }
            Op::MeanGroups(a, group) => {
                let s = self.shape(*a);
                let mut d = Array::zeros(s[0], s[1]);
                for r in 0..s[0] {
                    for c in 0..s[1] {
                        d.set(r, c, g.get(r / group, c) / *group as f64);
                    }
                }
                acc(*a, d);
            }
            Op::MaxGroups(a) => {
                let s = self.shape(*a);
                let mut d = Array::zeros(s[0], s[1]);
                for gr in 0..g.rows() {
                    for c in 0..s[1] {
                        let r = node.aux[gr * s[1] + c] as usize;
                        d.set(r, c, d.get(r, c) + g.get(gr, c));
                    }
                }
                acc(*a, d);
            }
            Op::Reshape(a) => {
                let s = self.shape(*a);
                acc(*a, Array::new(s[0], s[1], g.into_data()).expect("reshape grad"));
            }
        }
    }
}

fn column_sums(g: &Array) -> Array {
    let mut out = Array::zeros(1, g.cols());
    for r in 0..g.rows() {
        for c in 0..g.cols() {
            out.data_mut()[c] += g.get(r, c);
        }
    }
    out
}
