//! Eager tape for reverse-mode differentiation.
//!
//! Every op computes its value immediately and appends a node. Node ids are
//! handed out in creation order, so the node list is already topologically
//! sorted and `backward` is a single reverse sweep.

use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    /// Differentiable input.
    Leaf,
    /// Input that never receives a gradient.
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `n×m` plus a `1×m` row repeated down every row.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    RowSoftmax(Var),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
    ClampMin(Var, f64),
    StopGradient(Var),
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Constant => "constant",
            OpKind::MatMul(..) => "matmul",
            OpKind::Add(..) => "add",
            OpKind::Sub(..) => "sub",
            OpKind::AddRow(..) => "add_row",
            OpKind::Mul(..) => "mul",
            OpKind::Scale(..) => "scale",
            OpKind::AddScalar(..) => "add_scalar",
            OpKind::LeakyRelu(..) => "leaky_relu",
            OpKind::Exp(..) => "exp",
            OpKind::Log(..) => "log",
            OpKind::RowSoftmax(..) => "row_softmax",
            OpKind::RowSum(..) => "row_sum",
            OpKind::Sum(..) => "sum",
            OpKind::Mean(..) => "mean",
            OpKind::Square(..) => "square",
            OpKind::ClampMin(..) => "clamp_min",
            OpKind::StopGradient(..) => "stop_gradient",
        }
    }

    fn parents(&self) -> [Option<Var>; 2] {
        use OpKind::*;
        match *self {
            Leaf | Constant => [None, None],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | AddRow(a, b) | Mul(a, b) => [Some(a), Some(b)],
            Scale(a, _) | AddScalar(a, _) | LeakyRelu(a, _) | Exp(a) | Log(a) | RowSoftmax(a)
            | RowSum(a) | Sum(a) | Mean(a) | Square(a) | ClampMin(a, _) | StopGradient(a) => {
                [Some(a), None]
            }
        }
    }
}

struct Node {
    op: OpKind,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> OpKind {
        self.nodes[v.0].op
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(OpKind::Leaf, t, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(OpKind::Constant, t, false)
    }

    fn push(&mut self, op: OpKind, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends a computed node. The value must be finite; parents decide
    /// whether the node participates in the backward pass.
    pub fn record(&mut self, op: OpKind, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op.name().into()));
        }
        let requires_grad = match op {
            OpKind::Leaf => true,
            OpKind::Constant | OpKind::StopGradient(_) => false,
            _ => op
                .parents()
                .iter()
                .flatten()
                .any(|p| self.nodes[p.0].requires_grad),
        };
        Ok(self.push(op, Tensor::from_parts(shape, data), requires_grad))
    }

    fn unary(&mut self, op: OpKind, a: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let data = t.data().iter().map(|&v| f(v)).collect();
        self.record(op, shape, data)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    fn binary(&mut self, op: OpKind, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = ta.shape().to_vec();
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.record(op, shape, data)
    }

    fn need_matrix(&self, op: &'static str, a: Var) -> Result<()> {
        let t = self.value(a);
        if !is_matrix(t) {
            return Err(Error::Shape {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_matrix(ta) || !is_matrix(tb) || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let data = matmul_raw(ta.data(), tb.data(), n, k, m);
        self.record(OpKind::MatMul(a, b), vec![n, m], data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if !is_matrix(ta) || tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err("add_row", ta, tr));
        }
        let c = ta.cols();
        let shape = ta.shape().to_vec();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tr.data()[i % c])
            .collect();
        self.record(OpKind::AddRow(a, row), shape, data)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(OpKind::Scale(a, c), a, |v| v * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(OpKind::AddScalar(a, c), a, |v| v + c)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(OpKind::LeakyRelu(a, slope), a, |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(OpKind::Exp(a), a, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::LogDomain(bad));
        }
        self.unary(OpKind::Log(a), a, f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(OpKind::Square(a), a, |v| v * v)
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary(OpKind::ClampMin(a, floor), a, |v| v.max(floor))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        self.need_matrix("row_softmax", a)?;
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let mut data = Vec::with_capacity(t.numel());
        for row in t.row_iter() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut z = 0.0;
            for &v in row {
                let e = (v - m).exp();
                z += e;
                data.push(e);
            }
            for e in &mut data[start..] {
                *e /= z;
            }
        }
        self.record(OpKind::RowSoftmax(a), shape, data)
    }

    /// `n×m → n×1`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        self.need_matrix("row_sum", a)?;
        let t = self.value(a);
        let n = t.rows();
        let data = t.row_iter().map(|r| r.iter().sum()).collect();
        self.record(OpKind::RowSum(a), vec![n, 1], data)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.record(OpKind::Sum(a), vec![1], vec![s])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.sum() / t.numel() as f64;
        self.record(OpKind::Mean(a), vec![1], vec![m])
    }

    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(OpKind::StopGradient(a), value, false)
    }

    /// Reverse sweep from a one-element node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rt = self.value(root);
        if !rt.is_scalar() {
            return Err(Error::NonScalarRoot(rt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        let mut out: Vec<Option<Tensor>> = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad)
                    .map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g))
            })
            .collect();
        out.resize_with(self.nodes.len(), || None);
        Ok(Gradients {
            grads: out,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        use OpKind::*;
        let val = |v: Var| self.value(v).data();
        match node.op {
            Leaf | Constant | StopGradient(_) => {}
            MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                if self.wants(a) {
                    let bt = transpose_raw(tb.data(), k, m);
                    Self::accumulate(grads, a, matmul_raw(g, &bt, n, m, k));
                }
                if self.wants(b) {
                    let at = transpose_raw(ta.data(), n, k);
                    Self::accumulate(grads, b, matmul_raw(&at, g, k, n, m));
                }
            }
            Add(a, b) => {
                if self.wants(a) {
                    Self::accumulate(grads, a, g.to_vec());
                }
                if self.wants(b) {
                    Self::accumulate(grads, b, g.to_vec());
                }
            }
            Sub(a, b) => {
                if self.wants(a) {
                    Self::accumulate(grads, a, g.to_vec());
                }
                if self.wants(b) {
                    Self::accumulate(grads, b, g.iter().map(|v| -v).collect());
                }
            }
            AddRow(a, row) => {
                if self.wants(a) {
                    Self::accumulate(grads, a, g.to_vec());
                }
                if self.wants(row) {
                    let c = self.value(row).cols();
                    let mut acc = vec![0.0; c];
                    for chunk in g.chunks(c) {
                        for (s, v) in acc.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                    Self::accumulate(grads, row, acc);
                }
            }
            Mul(a, b) => {
                if self.wants(a) {
                    let c = g.iter().zip(val(b)).map(|(g, y)| g * y).collect();
                    Self::accumulate(grads, a, c);
                }
                if self.wants(b) {
                    let c = g.iter().zip(val(a)).map(|(g, x)| g * x).collect();
                    Self::accumulate(grads, b, c);
                }
            }
            Scale(a, c) => Self::accumulate(grads, a, g.iter().map(|v| v * c).collect()),
            AddScalar(a, _) => Self::accumulate(grads, a, g.to_vec()),
            LeakyRelu(a, slope) => {
                let c = g
                    .iter()
                    .zip(val(a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                    .collect();
                Self::accumulate(grads, a, c);
            }
            Exp(a) => {
                let c = g.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                Self::accumulate(grads, a, c);
            }
            Log(a) => {
                let c = g.iter().zip(val(a)).map(|(g, x)| g / x).collect();
                Self::accumulate(grads, a, c);
            }
            Square(a) => {
                let c = g.iter().zip(val(a)).map(|(g, x)| 2.0 * x * g).collect();
                Self::accumulate(grads, a, c);
            }
            ClampMin(a, floor) => {
                let c = g
                    .iter()
                    .zip(val(a))
                    .map(|(g, &x)| if x > floor { *g } else { 0.0 })
                    .collect();
                Self::accumulate(grads, a, c);
            }
            RowSoftmax(a) => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut c = vec![0.0; y.len()];
                for ((yr, gr), cr) in y.chunks(cols).zip(g.chunks(cols)).zip(c.chunks_mut(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((o, &yv), &gv) in cr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                Self::accumulate(grads, a, c);
            }
            RowSum(a) => {
                let cols = self.value(a).cols();
                let c = g.iter().flat_map(|&v| std::iter::repeat_n(v, cols)).collect();
                Self::accumulate(grads, a, c);
            }
            Sum(a) => {
                let n = self.value(a).numel();
                Self::accumulate(grads, a, vec![g[0]; n]);
            }
            Mean(a) => {
                let n = self.value(a).numel();
                Self::accumulate(grads, a, vec![g[0] / n as f64; n]);
            }
        }
    }
}
