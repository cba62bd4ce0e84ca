//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node whose parents already sit on the tape, so
//! node order is a topological order and [`Tape::backward`] is a single
//! reverse sweep that visits each node once.
//!
//! Broadcasting is limited to [`Tape::add_bias`]; every other op requires
//! exactly matching shapes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat(Var, Var),
    GatherRows(Var, Vec<usize>),
    Dot(Var, Var),
    Sum(Var),
    Mean(Var),
    Bce(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
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

    /// Leaf that receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts_unchecked(shape, data),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::AddBias(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::Concat(a, b)
            | Op::Dot(a, b) => vec![a, b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SoftmaxRows(a)
            | Op::Sigmoid(a)
            | Op::Gelu(a)
            | Op::GatherRows(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Bce(a, _) => vec![a],
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        match *self.shape(a) {
            [m, n] => Ok((m, n)),
            ref s => Err(Error::Shape {
                op,
                left: s.to_vec(),
                right: vec![],
            }),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.push("add", shape, data, Op::Add(a, b))
    }

    /// Adds a vector to every row of `x` along the last dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias);
        if bs.len() != 1 || xs.last() != bs.first() {
            return Err(Error::Shape {
                op: "add_bias",
                left: xs,
                right: bs.to_vec(),
            });
        }
        let b = self.value(bias).data();
        let n = b.len();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        self.push("add_bias", xs, data, Op::AddBias(x, bias))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        self.push("mul", shape, data, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|v| v * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, data, Op::Scale(a, factor))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", vec![m, n], data, Op::MatMul(a, b))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape {
                op: "transpose",
                left: shape,
                right: vec![],
            });
        }
        let data = transpose_raw(self.value(a).data(), &shape);
        let mut out = shape;
        let r = out.len();
        out.swap(r - 2, r - 1);
        self.push("transpose", out, data, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        self.push("reshape", shape.to_vec(), value.into_data(), Op::Reshape(a))
    }

    /// Row-wise softmax over the last axis of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("softmax_rows", a)?;
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[r * n..(r + 1) * n];
            let mut total = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - max).exp();
                total += *o;
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        self.push("softmax_rows", vec![m, n], data, Op::SoftmaxRows(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&z| sigmoid(z)).collect();
        let shape = self.shape(a).to_vec();
        self.push("sigmoid", shape, data, Op::Sigmoid(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("gelu", shape, data, Op::Gelu(a))
    }

    /// Normalizes each row of a matrix, then applies `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("layer_norm", x)?;
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: vec![m, n],
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                data[r * n + c] = h * g[c] + b[c];
            }
        }
        self.push(
            "layer_norm",
            vec![m, n],
            data,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Concatenates two matrices along the last axis.
    pub fn concat_last_dim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.matrix_dims("concat_last_dim", a)?;
        let (m2, q) = self.matrix_dims("concat_last_dim", b)?;
        if m != m2 {
            return Err(Error::Shape {
                op: "concat_last_dim",
                left: vec![m, p],
                right: vec![m2, q],
            });
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            data.extend_from_slice(&da[r * p..(r + 1) * p]);
            data.extend_from_slice(&db[r * q..(r + 1) * q]);
        }
        self.push("concat_last_dim", vec![m, p + q], data, Op::Concat(a, b))
    }

    /// Selects rows of a matrix by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims("gather_rows", a)?;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: r,
                    len: m,
                });
            }
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        self.push("gather_rows", vec![rows.len(), n], data, Op::GatherRows(a, rows.to_vec()))
    }

    /// Looks up one embedding row per id.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Contiguous rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &rows)
    }

    /// Flat inner product of two same-shape tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let v = crate::tensor::flat_dot(self.value(a).data(), self.value(b).data());
        self.push("dot", vec![], vec![v], Op::Dot(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).data().iter().sum();
        self.push("sum", vec![], vec![v], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", vec![], vec![v], Op::Mean(a))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and 0/1 targets,
    /// in the overflow-free form `max(z,0) - z*t + ln(1 + e^-|z|)`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                left: self.shape(logits).to_vec(),
                right: targets.shape().to_vec(),
            });
        }
        if let Some(t) = targets.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::InvalidTensor(format!("bce target {t} is not 0 or 1")));
        }
        let z = self.value(logits).data();
        let n = z.len() as f64;
        let total: f64 = z
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| bce_cell(z, t))
            .sum();
        self.push(
            "bce_with_logits",
            vec![],
            vec![total / n],
            Op::Bce(logits, targets.data().to_vec()),
        )
    }

    /// Propagates gradients from a scalar `loss` to every node that requires
    /// them. Running it again before [`Tape::zero_grad`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    /// Clears gradients so that backward may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Gradient of the last backward pass with respect to `v`.
    ///
    /// Nodes that require gradients but were not reached get zeros; nodes
    /// that do not require gradients return `None`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        if !self.nodes[v.0].requires_grad || !self.backward_done {
            return None;
        }
        let shape = self.shape(v).to_vec();
        let data = match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => vec![0.0; self.value(v).numel()],
        };
        Some(Tensor::from_parts_unchecked(shape, data))
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, |ga| add_into(ga, g));
                self.accumulate(b, |gb| add_into(gb, g));
            }
            Op::AddBias(x, b) => {
                let n = self.value(b).numel();
                self.accumulate(x, |gx| add_into(gx, g));
                self.accumulate(b, |gb| {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % n] += v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(a).data().to_vec();
                let bv = self.value(b).data().to_vec();
                self.accumulate(a, |ga| {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(&bv) {
                        *o += gi * bi;
                    }
                });
                self.accumulate(b, |gb| {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(&av) {
                        *o += gi * ai;
                    }
                });
            }
            Op::Scale(a, c) => self.accumulate(a, |ga| {
                for (o, gi) in ga.iter_mut().zip(g) {
                    *o += c * gi;
                }
            }),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.nodes[a.0].requires_grad {
                    // dA = G · Bᵀ
                    let bt = transpose_raw(self.value(b).data(), &[k, n]);
                    let da = matmul_raw(g, &bt, m, n, k);
                    self.accumulate(a, |ga| add_into(ga, &da));
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · G
                    let at = transpose_raw(self.value(a).data(), &[m, k]);
                    let db = matmul_raw(&at, g, k, m, n);
                    self.accumulate(b, |gb| add_into(gb, &db));
                }
            }
            Op::Transpose(a) => {
                let gt = transpose_raw(g, self.nodes[id].value.shape());
                self.accumulate(a, |ga| add_into(ga, &gt));
            }
            Op::Reshape(a) => self.accumulate(a, |ga| add_into(ga, g)),
            Op::SoftmaxRows(a) => {
                let n = self.nodes[id].value.shape()[1];
                let y = self.nodes[id].value.data().to_vec();
                self.accumulate(a, |ga| {
                    for (r, (gr, yr)) in g.chunks(n).zip(y.chunks(n)).enumerate() {
                        let inner: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            ga[r * n + c] += yr[c] * (gr[c] - inner);
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[id].value.data().to_vec();
                self.accumulate(a, |ga| {
                    for ((o, gi), yi) in ga.iter_mut().zip(g).zip(&y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.value(a).data().to_vec();
                self.accumulate(a, |ga| {
                    for ((o, gi), &x) in ga.iter_mut().zip(g).zip(&x) {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *o += gi * (0.5 * (1.0 + t) + 0.5 * x * dt);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                ref xhat,
                ref rstd,
            } => {
                let n = self.nodes[id].value.shape()[1];
                let gam = self.value(gamma).data().to_vec();
                self.accumulate(gamma, |gg| {
                    for (i, (gi, h)) in g.iter().zip(xhat).enumerate() {
                        gg[i % n] += gi * h;
                    }
                });
                self.accumulate(beta, |gb| {
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % n] += gi;
                    }
                });
                self.accumulate(x, |gx| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let row = r * n..(r + 1) * n;
                        let gh: Vec<f64> = g[row.clone()].iter().zip(&gam).map(|(a, b)| a * b).collect();
                        let h = &xhat[row];
                        let mean_gh = gh.iter().sum::<f64>() / n as f64;
                        let mean_ghh = gh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for c in 0..n {
                            gx[r * n + c] += rs * (gh[c] - mean_gh - h[c] * mean_ghh);
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let p = self.shape(a)[1];
                let q = self.shape(b)[1];
                self.accumulate(a, |ga| {
                    for (r, chunk) in g.chunks(p + q).enumerate() {
                        add_into(&mut ga[r * p..(r + 1) * p], &chunk[..p]);
                    }
                });
                self.accumulate(b, |gb| {
                    for (r, chunk) in g.chunks(p + q).enumerate() {
                        add_into(&mut gb[r * q..(r + 1) * q], &chunk[p..]);
                    }
                });
            }
            Op::GatherRows(a, ref rows) => {
                let n = self.shape(a)[1];
                self.accumulate(a, |ga| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut ga[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::Dot(a, b) => {
                let av = self.value(a).data().to_vec();
                let bv = self.value(b).data().to_vec();
                let s = g[0];
                self.accumulate(a, |ga| {
                    for (o, bi) in ga.iter_mut().zip(&bv) {
                        *o += s * bi;
                    }
                });
                self.accumulate(b, |gb| {
                    for (o, ai) in gb.iter_mut().zip(&av) {
                        *o += s * ai;
                    }
                });
            }
            Op::Sum(a) => {
                let s = g[0];
                self.accumulate(a, |ga| ga.iter_mut().for_each(|o| *o += s));
            }
            Op::Mean(a) => {
                let s = g[0] / self.value(a).numel() as f64;
                self.accumulate(a, |ga| ga.iter_mut().for_each(|o| *o += s));
            }
            Op::Bce(logits, ref targets) => {
                let z = self.value(logits).data().to_vec();
                let s = g[0] / z.len() as f64;
                self.accumulate(logits, |gz| {
                    for ((o, &z), t) in gz.iter_mut().zip(&z).zip(targets) {
                        *o += s * (sigmoid(z) - t);
                    }
                });
            }
        }
        self.nodes[id].op = op;
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// BCE of one logit against a 0/1 target.
pub fn bce_cell(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Swaps the last two axes of a row-major buffer with the given shape.
fn transpose_raw(a: &[f64], shape: &[usize]) -> Vec<f64> {
    let r = shape.len();
    let (rows, cols) = (shape[r - 2], shape[r - 1]);
    let plane = rows * cols;
    let mut out = vec![0.0; a.len()];
    for (src, dst) in a.chunks(plane).zip(out.chunks_mut(plane)) {
        for i in 0..rows {
            for j in 0..cols {
                dst[j * rows + i] = src[i * cols + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::eye(2));
        let a = tape.constant(m(&[&[1.5, -2.0], &[0.25, 7.0]]));
        let out = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(out), tape.value(a));

        let a = tape.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(m(&[&[0.0], &[1.0]]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let a = tape.constant(m(&[&[0.0, 0.0, 0.0], &[1000.0, 0.0, -1000.0]]));
        let s = tape.softmax_rows(a).unwrap();
        let v = tape.value(s);
        for c in 0..3 {
            assert!((v.at(&[0, c]) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((v.at(&[1, 0]) - 1.0).abs() < 1e-12);
        assert!(v.at(&[1, 1]) < 1e-300);
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let unused = tape.param(Tensor::zeros(&[2, 2]));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.add(x, c).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(unused).unwrap().data(), &[0.0; 4]);
        assert_eq!(tape.grad(c), None);
    }

    #[test]
    fn constant_loss_gives_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let loss = tape.sum(c).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 0.0);
    }

    #[test]
    fn backward_twice_is_an_error_until_zeroed() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::BackwardTwice)));
        tape.zero_grad();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn bce_analytic_values() {
        let mut tape = Tape::new();
        let z = tape.param(Tensor::zeros(&[2, 2]));
        let l = tape.bce_with_logits(z, &Tensor::full(&[2, 2], 1.0)).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let t = Tensor::new(vec![4], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let z = tape.constant(t.map(|v| if v == 1.0 { 30.0 } else { -30.0 }));
        let l = tape.bce_with_logits(z, &t).unwrap();
        assert!(tape.value(l).item() < 1e-9);
        assert!(tape.value(l).item() >= 0.0);
    }

    #[test]
    fn bce_rejects_bad_targets() {
        let mut tape = Tape::new();
        let z = tape.param(Tensor::zeros(&[2]));
        assert!(tape.bce_with_logits(z, &Tensor::full(&[2], 0.5)).is_err());
        assert!(tape.bce_with_logits(z, &Tensor::full(&[3], 1.0)).is_err());
    }

    #[test]
    fn add_bias_is_the_only_broadcast() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.add_bias(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let v = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(x, v).is_err());
    }

    #[test]
    fn overflow_is_reported() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1], 1e200));
        assert!(matches!(tape.mul(x, x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn transpose_of_rank3_swaps_last_axes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 2, 3], (0..12).map(f64::from).collect()).unwrap());
        let t = tape.transpose(x).unwrap();
        let v = tape.value(t);
        assert_eq!(v.shape(), &[2, 3, 2]);
        assert_eq!(v.at(&[1, 2, 0]), tape.value(x).at(&[1, 0, 2]));
    }
}
