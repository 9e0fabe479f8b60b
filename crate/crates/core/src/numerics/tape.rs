//! Reverse-mode differentiation over a flat list of recorded primitives.
//!
//! Every primitive refers only to earlier nodes, so the node list is already
//! in topological order and `backward` is a single reverse sweep.

use std::collections::BTreeMap;

use super::params::{GradientMap, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Ln(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Transpose(Var),
    SliceCols { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    SelectRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Named bindings from parameter names to tape variables.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name:?} is not bound")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }
}

/// The computation record: an append-only list of primitive applications
/// plus a registry of named parameters.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// Registers a named parameter. Registering the same name twice is a
    /// contract error.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!("parameter {name:?} registered twice")));
        }
        let v = self.push_leaf(value, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Registers every tensor of `params` and returns the name bindings.
    pub fn bind(&mut self, params: &ParamSet) -> Result<Bindings> {
        let mut vars = BTreeMap::new();
        for (name, t) in params.iter() {
            vars.insert(name.to_string(), self.param(name, t.clone())?);
        }
        Ok(Bindings { vars })
    }

    fn push_leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_2d(&self, op: &'static str, v: Var) -> Result<()> {
        if self.shape(v).len() != 2 {
            return Err(Error::dim(op, self.shape(v), &[0, 0]));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_2d("matmul", a)?;
        self.check_2d("matmul", b)?;
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out, &[a, b]))
    }

    /// [`Tape::matmul`] with an order-independent reduction; see
    /// [`Tensor::matmul_sorted`].
    pub fn matmul_sorted(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_2d("matmul", a)?;
        self.check_2d("matmul", b)?;
        let out = self.value(a).matmul_sorted(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), out, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), out, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), out, &[a, b]))
    }

    /// `x (n x m) + b` with `b` broadcast to every row.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check_2d("add_row_bias", x)?;
        let (n, m) = self.value(x).dims2();
        let bias = self.value(b);
        if bias.numel() != m || bias.rows() != 1 {
            return Err(Error::dim("add_row_bias", self.shape(x), bias.shape()));
        }
        let mut out = self.value(x).clone();
        let bd = bias.data().to_vec();
        for i in 0..n {
            for (o, bv) in out.data_mut()[i * m..(i + 1) * m].iter_mut().zip(&bd) {
                *o += bv;
            }
        }
        Ok(self.push(Op::AddRowBias(x, b), out, &[x, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(Op::Scale(a, c), out, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(Op::AddScalar(a), out, &[a])
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).sigmoid();
        self.push(Op::Sigmoid(a), out, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).tanh();
        self.push(Op::Tanh(a), out, &[a])
    }

    /// Natural logarithm; every input entry must be positive.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric("ln of a non-positive value".into()));
        }
        let out = self.value(a).map(f64::ln);
        Ok(self.push(Op::Ln(a), out, &[a]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax()?;
        Ok(self.push(Op::SoftmaxRows(a), out, &[a]))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).log_softmax();
        self.push(Op::LogSoftmaxRows(a), out, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(Op::Transpose(a), out, &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.value(a).dims2();
        if len == 0 || start + len > m {
            return Err(Error::dim("slice_cols", self.shape(a), &[start, len]));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&src[i * m + start..i * m + start + len]);
        }
        let out = Tensor::new(vec![n, len], data)?;
        Ok(self.push(Op::SliceCols { src: a, start }, out, &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        for &p in parts {
            if self.value(p).rows() != n {
                return Err(Error::dim("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let out = Tensor::new(vec![n, total], data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != m {
                return Err(Error::dim("concat_rows", self.shape(parts[0]), t.shape()));
            }
            n += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![n, m], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out, parts))
    }

    /// Mean over rows, `n x m -> 1 x m`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).mean_rows();
        self.push(Op::MeanRows(a), out, &[a])
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let out = self.value(a).select_rows(rows)?;
        Ok(self.push(Op::SelectRows(a, rows.to_vec()), out, &[a]))
    }

    /// Picks `a[i, cols[i]]` from every row, giving an `n x 1` column.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (n, m) = self.value(a).dims2();
        if cols.len() != n {
            return Err(Error::dim("pick", self.shape(a), &[cols.len()]));
        }
        let mut data = Vec::with_capacity(n);
        for (i, &c) in cols.iter().enumerate() {
            if c >= m {
                return Err(Error::Contract(format!("pick index {c} out of range for {m} columns")));
            }
            data.push(self.value(a).get(i, c));
        }
        let out = Tensor::new(vec![n, 1], data)?;
        Ok(self.push(Op::Pick(a, cols.to_vec()), out, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(Op::Mean(a), out, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), out, &[a]))
    }

    /// Exact reverse-mode gradients of the scalar `loss` with respect to
    /// every registered parameter. Parameters that do not influence the
    /// loss get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut out = GradientMap::default();
        for (name, &v) in &self.params {
            let g = match grads.get(v.0).and_then(Option::as_ref) {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.shape(v)),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let ga = g.matmul_nt(self.value(*b))?;
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = self.value(*a).matmul_tn(g)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?);
                }
            }
            Op::AddRowBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*b) {
                    let summed = g.mean_rows().scale(g.rows() as f64);
                    let gb = summed.reshape(self.shape(*b))?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Sigmoid(a) => {
                let local = out.map(|s| s * (1.0 - s));
                self.accumulate(grads, *a, g.mul(&local)?);
            }
            Op::Tanh(a) => {
                let local = out.map(|t| 1.0 - t * t);
                self.accumulate(grads, *a, g.mul(&local)?);
            }
            Op::Ln(a) => {
                let local = self.value(*a).map(|x| 1.0 / x);
                self.accumulate(grads, *a, g.mul(&local)?);
            }
            Op::SoftmaxRows(a) => {
                // dx = y * (g - <g, y>) per row
                let (n, m) = out.dims2();
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    let y = out.row_slice(i);
                    let gi = g.row_slice(i);
                    let inner: f64 = y.iter().zip(gi).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        dx[i * m + j] = y[j] * (gi[j] - inner);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::LogSoftmaxRows(a) => {
                // dx = g - softmax * sum(g) per row
                let (n, m) = out.dims2();
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    let lp = out.row_slice(i);
                    let gi = g.row_slice(i);
                    let total: f64 = gi.iter().sum();
                    for j in 0..m {
                        dx[i * m + j] = gi[j] - lp[j].exp() * total;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::SliceCols { src, start } => {
                if self.needs(*src) {
                    let (n, m) = self.value(*src).dims2();
                    let len = g.cols();
                    let mut dx = Tensor::zeros(self.shape(*src));
                    for i in 0..n {
                        dx.data_mut()[i * m + start..i * m + start + len].copy_from_slice(g.row_slice(i));
                    }
                    self.accumulate(grads, *src, dx);
                }
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(n * w);
                        for i in 0..n {
                            data.extend_from_slice(&g.row_slice(i)[offset..offset + w]);
                        }
                        let gp = Tensor::new(self.shape(p).to_vec(), data)?;
                        self.accumulate(grads, p, gp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let m = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.needs(p) {
                        let data = g.data()[offset * m..(offset + r) * m].to_vec();
                        self.accumulate(grads, p, Tensor::new(self.shape(p).to_vec(), data)?);
                    }
                    offset += r;
                }
            }
            Op::MeanRows(a) => {
                let (n, m) = self.value(*a).dims2();
                let mut dx = Vec::with_capacity(n * m);
                for _ in 0..n {
                    dx.extend(g.data().iter().map(|v| v / n as f64));
                }
                self.accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), dx)?);
            }
            Op::SelectRows(a, rows) => {
                if self.needs(*a) {
                    let m = g.cols();
                    let mut dx = Tensor::zeros(self.shape(*a));
                    for (k, &r) in rows.iter().enumerate() {
                        for (d, v) in dx.data_mut()[r * m..(r + 1) * m].iter_mut().zip(g.row_slice(k)) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *a, dx);
                }
            }
            Op::Pick(a, cols) => {
                let m = self.value(*a).cols();
                let mut dx = Tensor::zeros(self.shape(*a));
                for (i, &c) in cols.iter().enumerate() {
                    dx.data_mut()[i * m + c] += g.data()[i];
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), g.item()));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), g.item() / n));
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.reshape(self.shape(*a))?);
            }
        }
        Ok(())
    }
}
