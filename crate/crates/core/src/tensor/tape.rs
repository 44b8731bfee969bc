//! Define-by-run operation tape. Each training step builds a fresh [`Tape`],
//! records forward operations, and walks the records once in reverse to
//! accumulate adjoints. A tape is confined to one thread for its lifetime.

use super::linalg;
use super::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    StopGrad(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Broadcast-add a column vector (m x 1) to every column of an m x n matrix.
    AddCol(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    /// Column gather: output column t is input column idx[t].
    GatherCols(Var, Vec<usize>),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    /// Row-wise softmax of x / temperature.
    SoftmaxRows(Var, f64),
    /// Column-wise layer norm with learned per-row gain/bias.
    LayerNorm { x: Var, gamma: Var, beta: Var },
    L2NormalizeCols(Var),
    Sum(Var),
    Cholesky(Var),
    LogDetSpd(Var),
    SpdSolve(Var, Var),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    /// Saved intermediates for the adjoint rule (Cholesky factor, solve result).
    aux: Vec<Tensor>,
}

/// Gradient map produced by [`Tape::backward`]; leaves read their adjoints here.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, or a zero tensor of the given shape when no gradient
    /// reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, aux: Vec<Tensor>) -> Var {
        self.nodes.push(Node { op, value, requires_grad, aux });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Tracked leaf; receives an adjoint in [`Tape::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true, vec![])
    }

    /// Untracked leaf. No adjoint is ever computed for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false, vec![])
    }

    /// Forwards the value, blocks all adjoint flow through it. Exact: anything
    /// upstream of the marker receives zero contribution from this path.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(Op::StopGrad(v), value, false, vec![])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: self.shape(a).to_vec(),
                got: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.axpy(1.0, self.value(b), 1.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), out, rg, vec![]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let mut out = self.value(a).clone();
        out.axpy(1.0, self.value(b), -1.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), out, rg, vec![]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), out, rg, vec![]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| c * v);
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), out, rg, vec![])
    }

    pub fn add_col(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
        if self.shape(b) != [m, 1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_col",
                expected: vec![m, 1],
                got: self.shape(b).to_vec(),
            });
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = av.clone();
        for i in 0..m {
            let bi = bv.data()[i];
            for j in 0..n {
                out.data_mut()[i * n + j] += bi;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::AddCol(a, b), out, rg, vec![]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (k2, n) = (self.shape(b)[0], self.shape(b)[1]);
        if k != k2 {
            return Err(TensorError::MatmulMismatch { m, k, k2, n });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), out, rg, vec![]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(Op::Transpose(a), out, rg, vec![])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty());
        let m = self.shape(parts[0])[0];
        let mut n = 0;
        for &p in parts {
            if self.shape(p)[0] != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    expected: vec![m, self.shape(p)[1]],
                    got: self.shape(p).to_vec(),
                });
            }
            n += self.shape(p)[1];
        }
        let mut out = Tensor::zeros(vec![m, n]);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            let pc = pv.cols();
            for i in 0..m {
                for j in 0..pc {
                    out.data_mut()[i * n + off + j] = pv.at(i, j);
                }
            }
            off += pc;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, rg, vec![]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
        if start + len > n {
            return Err(TensorError::Invalid(format!(
                "slice_cols {start}..{} out of bounds for {m}x{n}",
                start + len
            )));
        }
        let av = self.value(a);
        let mut out = Tensor::zeros(vec![m, len]);
        for i in 0..m {
            for j in 0..len {
                out.data_mut()[i * len + j] = av.at(i, start + j);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::SliceCols(a, start, len), out, rg, vec![]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0])[1];
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            if self.shape(p)[1] != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    expected: vec![self.shape(p)[0], n],
                    got: self.shape(p).to_vec(),
                });
            }
            m += self.shape(p)[0];
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![m, n], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out, rg, vec![]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
        if start + len > m {
            return Err(TensorError::Invalid(format!(
                "slice_rows {start}..{} out of bounds for {m}x{n}",
                start + len
            )));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(vec![len, n], data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::SliceRows(a, start, len), out, rg, vec![]))
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(TensorError::Invalid(format!(
                "gather_cols index {bad} out of bounds for {m}x{n}"
            )));
        }
        let av = self.value(a);
        let t = idx.len();
        let mut out = Tensor::zeros(vec![m, t]);
        for i in 0..m {
            for (jj, &j) in idx.iter().enumerate() {
                out.data_mut()[i * t + jj] = av.at(i, j);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::GatherCols(a, idx.to_vec()), out, rg, vec![]))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_fwd);
        let rg = self.rg(a);
        self.push(Op::Gelu(a), out, rg, vec![])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(f64::exp);
        if !out.all_finite() {
            return Err(TensorError::NonFinite { op: "exp" });
        }
        let rg = self.rg(a);
        Ok(self.push(Op::Exp(a), out, rg, vec![]))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(f64::ln);
        if !out.all_finite() {
            return Err(TensorError::NonFinite { op: "log" });
        }
        let rg = self.rg(a);
        Ok(self.push(Op::Log(a), out, rg, vec![]))
    }

    /// Softmax of each row of `a / temperature`; rows of the output sum to 1.
    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var, TensorError> {
        if temperature <= 0.0 {
            return Err(TensorError::BadTemperature(temperature));
        }
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            let row = &av.data()[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / temperature;
            let mut denom = 0.0;
            for j in 0..n {
                let e = (row[j] / temperature - mx).exp();
                out.data_mut()[i * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                out.data_mut()[i * n + j] /= denom;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::SoftmaxRows(a, temperature), out, rg, vec![]))
    }

    /// Column-wise layer norm of `x` (m x n) with per-row gain and bias
    /// (each m x 1): every column is standardized over its m entries, then
    /// scaled and shifted.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [m, 1] {
                return Err(TensorError::ShapeMismatch {
                    op: if name == "gamma" { "layer_norm gamma" } else { "layer_norm beta" },
                    expected: vec![m, 1],
                    got: self.shape(v).to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut out = Tensor::zeros(vec![m, n]);
        let mut xhat = Tensor::zeros(vec![m, n]);
        let mut istd = Tensor::zeros(vec![1, n]);
        for j in 0..n {
            let mut mean = 0.0;
            for i in 0..m {
                mean += xv.at(i, j);
            }
            mean /= m as f64;
            let mut var = 0.0;
            for i in 0..m {
                let dv = xv.at(i, j) - mean;
                var += dv * dv;
            }
            var /= m as f64;
            let is = 1.0 / (var + eps).sqrt();
            istd.data_mut()[j] = is;
            for i in 0..m {
                let xh = (xv.at(i, j) - mean) * is;
                xhat.data_mut()[i * n + j] = xh;
                out.data_mut()[i * n + j] = gv[i] * xh + bv[i];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta }, out, rg, vec![xhat, istd]))
    }

    /// Scale every column of `a` to unit Euclidean norm.
    pub fn l2_normalize_cols(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let mut norms = Tensor::zeros(vec![1, n]);
        for j in 0..n {
            let mut s = 0.0;
            for i in 0..m {
                let v = av.at(i, j);
                s += v * v;
            }
            let norm = s.sqrt();
            if norm <= 1e-12 {
                return Err(TensorError::ZeroNormColumn { index: j, norm });
            }
            norms.data_mut()[j] = norm;
        }
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[i * n + j] = av.at(i, j) / norms.data()[j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::L2NormalizeCols(a), out, rg, vec![norms]))
    }

    /// Sum of all entries, as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), Tensor::scalar(s), rg, vec![])
    }

    /// Lower-triangular Cholesky factor of an SPD matrix (symmetrized first).
    pub fn cholesky(&mut self, a: Var) -> Result<Var, TensorError> {
        let l = linalg::cholesky(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(Op::Cholesky(a), l, rg, vec![]))
    }

    /// log det of an SPD matrix as a 1x1 tensor; adjoint is g * A^-1.
    pub fn logdet_spd(&mut self, a: Var) -> Result<Var, TensorError> {
        let l = linalg::cholesky(self.value(a))?;
        let val = linalg::logdet_from_factor(&l);
        let rg = self.rg(a);
        Ok(self.push(Op::LogDetSpd(a), Tensor::scalar(val), rg, vec![l]))
    }

    /// Solve A X = B for SPD A via Cholesky.
    pub fn spd_solve(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(b)[0] != self.shape(a)[0] {
            return Err(TensorError::ShapeMismatch {
                op: "spd_solve",
                expected: vec![self.shape(a)[0], self.shape(b)[1]],
                got: self.shape(b).to_vec(),
            });
        }
        let l = linalg::cholesky(self.value(a))?;
        let x = linalg::solve_with_factor(&l, self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::SpdSolve(a, b), x.clone(), rg, vec![l, x]))
    }

    /// Reverse pass from a scalar loss. Visits every record exactly once in
    /// reverse topological (creation) order.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss { shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.rg(v) {
            return;
        }
        debug_assert_eq!(self.shape(v), delta.shape(), "adjoint shape mismatch");
        match &mut grads[v.0] {
            Some(g) => g.axpy(1.0, &delta, 1.0),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::StopGrad(_) => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let mut d = g.clone();
                    for (x, y) in d.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *x *= y;
                    }
                    self.accumulate(grads, *a, d);
                }
                if self.rg(*b) {
                    let mut d = g.clone();
                    for (x, y) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *x *= y;
                    }
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.map(|v| c * v));
            }
            Op::AddCol(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let (m, n) = (g.rows(), g.cols());
                    let mut d = Tensor::zeros(vec![m, 1]);
                    for i in 0..m {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g.at(i, j);
                        }
                        d.data_mut()[i] = s;
                    }
                    self.accumulate(grads, *b, d);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    // dA = g . B^T
                    let d = matmul_nt_raw(g.data(), self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], d).unwrap());
                }
                if self.rg(*b) {
                    // dB = A^T . g
                    let d = matmul_tn_raw(self.value(*a).data(), g.data(), k, m, n);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], d).unwrap());
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose());
            }
            Op::ConcatCols(parts) => {
                let n = g.cols();
                let m = g.rows();
                let mut off = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.rg(p) {
                        let mut d = Tensor::zeros(vec![m, pc]);
                        for i in 0..m {
                            for j in 0..pc {
                                d.data_mut()[i * pc + j] = g.data()[i * n + off + j];
                            }
                        }
                        self.accumulate(grads, p, d);
                    }
                    off += pc;
                }
            }
            Op::SliceCols(a, start, len) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut d = Tensor::zeros(vec![m, n]);
                for i in 0..m {
                    for j in 0..*len {
                        d.data_mut()[i * n + start + j] = g.at(i, j);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut off = 0;
                for &p in parts {
                    let pm = self.shape(p)[0];
                    if self.rg(p) {
                        let d = g.data()[off * n..(off + pm) * n].to_vec();
                        self.accumulate(grads, p, Tensor::new(vec![pm, n], d).unwrap());
                    }
                    off += pm;
                }
            }
            Op::SliceRows(a, start, len) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut d = Tensor::zeros(vec![m, n]);
                d.data_mut()[start * n..(start + len) * n].copy_from_slice(g.data());
                self.accumulate(grads, *a, d);
            }
            Op::GatherCols(a, idx) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let t = idx.len();
                let mut d = Tensor::zeros(vec![m, n]);
                for i in 0..m {
                    for (jj, &j) in idx.iter().enumerate() {
                        d.data_mut()[i * n + j] += g.data()[i * t + jj];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let mut d = g.clone();
                for (x, v) in d.data_mut().iter_mut().zip(av.data()) {
                    *x *= gelu_deriv(*v);
                }
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let mut d = g.clone();
                for (x, y) in d.data_mut().iter_mut().zip(node.value.data()) {
                    *x *= y;
                }
                self.accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                let mut d = g.clone();
                for (x, y) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *x /= y;
                }
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a, temperature) => {
                let y = &node.value;
                let (m, n) = (y.rows(), y.cols());
                let mut d = Tensor::zeros(vec![m, n]);
                for i in 0..m {
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += g.at(i, j) * y.at(i, j);
                    }
                    for j in 0..n {
                        d.data_mut()[i * n + j] = y.at(i, j) * (g.at(i, j) - dot) / temperature;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xhat = &node.aux[0];
                let istd = &node.aux[1];
                let (m, n) = (xhat.rows(), xhat.cols());
                let gv = self.value(*gamma);
                if self.rg(*x) {
                    let mut d = Tensor::zeros(vec![m, n]);
                    for j in 0..n {
                        let mut mean_gh = 0.0;
                        let mut mean_gh_xh = 0.0;
                        for i in 0..m {
                            let gh = g.at(i, j) * gv.data()[i];
                            mean_gh += gh;
                            mean_gh_xh += gh * xhat.at(i, j);
                        }
                        mean_gh /= m as f64;
                        mean_gh_xh /= m as f64;
                        let is = istd.data()[j];
                        for i in 0..m {
                            let gh = g.at(i, j) * gv.data()[i];
                            d.data_mut()[i * n + j] =
                                is * (gh - mean_gh - xhat.at(i, j) * mean_gh_xh);
                        }
                    }
                    self.accumulate(grads, *x, d);
                }
                if self.rg(*gamma) {
                    let mut d = Tensor::zeros(vec![m, 1]);
                    for i in 0..m {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g.at(i, j) * xhat.at(i, j);
                        }
                        d.data_mut()[i] = s;
                    }
                    self.accumulate(grads, *gamma, d);
                }
                if self.rg(*beta) {
                    let mut d = Tensor::zeros(vec![m, 1]);
                    for i in 0..m {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g.at(i, j);
                        }
                        d.data_mut()[i] = s;
                    }
                    self.accumulate(grads, *beta, d);
                }
            }
            Op::L2NormalizeCols(a) => {
                let y = &node.value;
                let norms = &node.aux[0];
                let (m, n) = (y.rows(), y.cols());
                let mut d = Tensor::zeros(vec![m, n]);
                for j in 0..n {
                    let mut dot = 0.0;
                    for i in 0..m {
                        dot += g.at(i, j) * y.at(i, j);
                    }
                    let inv = 1.0 / norms.data()[j];
                    for i in 0..m {
                        d.data_mut()[i * n + j] = (g.at(i, j) - y.at(i, j) * dot) * inv;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let gs = g.scalar_value();
                let shape = self.shape(*a).to_vec();
                let numel: usize = shape.iter().product();
                self.accumulate(grads, *a, Tensor::new(shape, vec![gs; numel]).unwrap());
            }
            Op::Cholesky(a) => {
                let l = &node.value;
                let d = cholesky_pullback(l, g);
                self.accumulate(grads, *a, d);
            }
            Op::LogDetSpd(a) => {
                let l = &node.aux[0];
                let inv = linalg::inverse_from_factor(l);
                let gs = g.scalar_value();
                self.accumulate(grads, *a, inv.map(|v| gs * v));
            }
            Op::SpdSolve(a, b) => {
                let l = &node.aux[0];
                let x = &node.aux[1];
                let s = linalg::solve_with_factor(l, g);
                if self.rg(*b) {
                    self.accumulate(grads, *b, s.clone());
                }
                if self.rg(*a) {
                    // dA = -(s x^T + x s^T)/2, matching the symmetrized forward
                    let d = self.shape(*a)[0];
                    let n = x.cols();
                    let sxt = matmul_nt_raw(s.data(), x.data(), d, n, d);
                    let mut da = Tensor::new(vec![d, d], sxt).unwrap();
                    let dat = da.transpose();
                    da.axpy(-0.5, &dat, -0.5);
                    self.accumulate(grads, *a, da);
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Reverse-mode rule for the Cholesky factor: with A = L L^T and adjoint
/// Lbar, the input adjoint is sym(L^-T Phi(L^T Lbar) L^-1) where Phi keeps
/// the lower triangle and halves the diagonal.
fn cholesky_pullback(l: &Tensor, lbar: &Tensor) -> Tensor {
    let d = l.rows();
    let ltlbar = matmul_tn_raw(l.data(), lbar.data(), d, d, d);
    let mut phi = Tensor::new(vec![d, d], ltlbar).unwrap();
    for i in 0..d {
        for j in 0..d {
            if j > i {
                phi.set(i, j, 0.0);
            } else if j == i {
                let v = phi.at(i, i) * 0.5;
                phi.set(i, i, v);
            }
        }
    }
    // Y = L^-T phi  <=>  L^T Y = phi  (back substitution per column)
    let y = lower_t_solve(l, &phi);
    // W = Y L^-1  <=>  W L = Y  <=>  L^T W^T = Y^T
    let wt = lower_t_solve(l, &y.transpose());
    let mut out = wt.transpose();
    let outt = out.transpose();
    out.axpy(0.5, &outt, 0.5);
    out
}

/// Solve L^T W = B for lower-triangular L.
fn lower_t_solve(l: &Tensor, b: &Tensor) -> Tensor {
    let d = l.rows();
    let n = b.cols();
    let mut w = Tensor::zeros(vec![d, n]);
    for j in 0..n {
        for i in (0..d).rev() {
            let mut s = b.at(i, j);
            for k in (i + 1)..d {
                s -= l.at(k, i) * w.at(k, j);
            }
            w.set(i, j, s / l.at(i, i));
        }
    }
    w
}
