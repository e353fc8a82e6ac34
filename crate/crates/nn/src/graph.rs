//! Reverse-mode differentiation over the handful of operations the shape
//! regression networks use. A [`Graph`] records one forward computation;
//! [`Graph::backward`] consumes it once.

use crate::error::{NnError, Result};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv3d { x: Var, w: Var, b: Var },
    MaxPool3d { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Prelu { x: Var, slope: Var },
    LeakyRelu { x: Var, slope: f64 },
    Linear { x: Var, w: Var, b: Var },
    Reshape { x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    Sum(Var),
    Mean(Var),
    RowSqNorm(Var),
    Focal { d: Var, a: f64, c: f64 },
    BceWithLogits { logits: Var, targets: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Focal weighting `e^2 / (1 + exp(a (c - e)))` and its derivative with respect to `e`,
/// divided by `e` so the gradient w.r.t. the difference vector is `factor * d`.
pub fn focal_value_and_factor(e: f64, a: f64, c: f64) -> (f64, f64) {
    let s = sigmoid(a * (e - c));
    (e * e * s, 2.0 * s + a * e * s * (1.0 - s))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, what: &str) -> Result<Var> {
        if self.consumed {
            return Err(NnError::GraphConsumed);
        }
        value.ensure_finite(what)?;
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Free leaf whose gradient can be read back with [`Graph::grad`].
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "variable")
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let p = store.get(id);
        let rg = p.requires_grad;
        self.push(p.value.clone(), Op::Param(id), rg, &p.name.clone())
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::conv3d_forward(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Conv3d { x, w, b }, rg, "conv3d")
    }

    pub fn max_pool3d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (out, argmax) = kernels::max_pool3d_forward(self.value(x), factor)?;
        let rg = self.rg(x);
        self.push(out, Op::MaxPool3d { x, argmax }, rg, "max_pool3d")
    }

    /// Per-channel normalization over batch and spatial axes. In training mode the
    /// running statistics are updated in place (unbiased variance, momentum 0.1).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&mut Tensor, &mut Tensor),
        mode: Mode,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (c, inner, n) = kernels::channel_layout(xv.shape())?;
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        if gv.len() != c || bv.len() != c || running.0.len() != c || running.1.len() != c {
            return Err(NnError::Shape(format!(
                "batch_norm over {c} channels given {} scales and {} shifts",
                gv.len(),
                bv.len()
            )));
        }
        let (mean_buf, var_buf) = running;
        let train = mode == Mode::Train;
        if train && n < 2 {
            return Err(NnError::BatchTooSmall(n));
        }
        let count = (n * inner) as f64;
        let xd = xv.data();
        let mut stats = vec![(0.0, 0.0); c];
        if train {
            for (ch, st) in stats.iter_mut().enumerate() {
                let mut s = 0.0;
                for b in 0..n {
                    let o = (b * c + ch) * inner;
                    s += xd[o..o + inner].iter().sum::<f64>();
                }
                let mean = s / count;
                let mut ss = 0.0;
                for b in 0..n {
                    let o = (b * c + ch) * inner;
                    ss += xd[o..o + inner].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                }
                *st = (mean, ss / count);
            }
            let unbias = count / (count - 1.0);
            for (ch, &(m, v)) in stats.iter().enumerate() {
                let rm = &mut mean_buf.data_mut()[ch];
                *rm = (1.0 - BATCH_NORM_MOMENTUM) * *rm + BATCH_NORM_MOMENTUM * m;
                let rv = &mut var_buf.data_mut()[ch];
                *rv = (1.0 - BATCH_NORM_MOMENTUM) * *rv + BATCH_NORM_MOMENTUM * v * unbias;
            }
        } else {
            for (ch, st) in stats.iter_mut().enumerate() {
                *st = (mean_buf.data()[ch], var_buf.data()[ch]);
            }
        }
        self.normalize(x, gamma, beta, &stats, train)
    }

    /// Inference-mode batch normalization reading the running statistics without
    /// borrowing them mutably.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &Tensor, var: &Tensor) -> Result<Var> {
        let (c, _, _) = kernels::channel_layout(self.value(x).shape())?;
        if mean.len() != c || var.len() != c {
            return Err(NnError::Shape(format!("batch_norm over {c} channels given {} running stats", mean.len())));
        }
        let stats: Vec<(f64, f64)> = mean.data().iter().zip(var.data()).map(|(&m, &v)| (m, v)).collect();
        self.normalize(x, gamma, beta, &stats, false)
    }

    fn normalize(&mut self, x: Var, gamma: Var, beta: Var, stats: &[(f64, f64)], train: bool) -> Result<Var> {
        let xv = self.value(x);
        let (c, inner, n) = kernels::channel_layout(xv.shape())?;
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        if gv.len() != c || bv.len() != c {
            return Err(NnError::Shape(format!("batch_norm over {c} channels given {} scales", gv.len())));
        }
        let xd = xv.data();
        let inv_std: Vec<f64> = stats.iter().map(|&(_, v)| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * inner;
                let (m, _) = stats[ch];
                for i in o..o + inner {
                    let h = (xd[i] - m) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, rg, "batch_norm")
    }

    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let xv = self.value(x);
        let (c, inner, n) = kernels::channel_layout(xv.shape())?;
        let s = self.value(slope).data();
        if s.len() != c {
            return Err(NnError::Shape(format!("prelu over {c} channels given {} slopes", s.len())));
        }
        let mut out = xv.data().to_vec();
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * inner;
                for v in &mut out[o..o + inner] {
                    if *v < 0.0 {
                        *v *= s[ch];
                    }
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(slope);
        self.push(out, Op::Prelu { x, slope }, rg, "prelu")
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let xv = self.value(x);
        let out: Vec<f64> = xv.data().iter().map(|&v| if v < 0.0 { slope * v } else { v }).collect();
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu { x, slope }, rg, "leaky_relu")
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::linear_forward(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Linear { x, w, b }, rg, "linear")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        self.push(out, Op::Reshape { x }, rg, "reshape")
    }

    /// Collapses all axes after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NnError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64, what: &str) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg, what)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y, "mul")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * k).collect())?;
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, k), rg, "scale")
    }

    fn row_broadcast(&self, x: Var, row: Var, what: &str) -> Result<usize> {
        let xs = self.value(x).shape();
        let rs = self.value(row).shape();
        if xs.len() != 2 || rs != [xs[1]] {
            return Err(NnError::Shape(format!("{what}: {xs:?} with row {rs:?}")));
        }
        Ok(xs[1])
    }

    /// `x[n, f] + row[f]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let f = self.row_broadcast(x, row, "add_row")?;
        let r = self.value(row).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, v)| v + r[i % f]).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(row);
        self.push(out, Op::AddRow { x, row }, rg, "add_row")
    }

    /// `x[n, f] * row[f]`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let f = self.row_broadcast(x, row, "mul_row")?;
        let r = self.value(row).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, v)| v * r[i % f]).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(row);
        self.push(out, Op::MulRow { x, row }, rg, "mul_row")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.sum() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg, "mean")
    }

    fn rows(&self, a: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(NnError::Shape(format!("{what} expects [rows, cols], got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Squared Euclidean norm of each row: `[R, K] -> [R]`.
    pub fn row_sq_norm(&mut self, a: Var) -> Result<Var> {
        let (r, k) = self.rows(a, "row_sq_norm")?;
        let data = self.value(a).data().chunks(k).map(|row| row.iter().map(|v| v * v).sum()).collect();
        let rg = self.rg(a);
        self.push(Tensor::new(vec![r], data)?, Op::RowSqNorm(a), rg, "row_sq_norm")
    }

    /// Focal-weighted squared norm of each row of a difference matrix `[R, K] -> [R]`.
    pub fn focal_rows(&mut self, d: Var, a: f64, c: f64) -> Result<Var> {
        let (r, k) = self.rows(d, "focal_rows")?;
        let data = self
            .value(d)
            .data()
            .chunks(k)
            .map(|row| {
                let e = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                focal_value_and_factor(e, a, c).0
            })
            .collect();
        let rg = self.rg(d);
        self.push(Tensor::new(vec![r], data)?, Op::Focal { d, a, c }, rg, "focal_rows")
    }

    /// Mean binary cross-entropy of logits against fixed 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != targets.len() {
            return Err(NnError::Shape(format!(
                "bce_with_logits: {} logits vs {} targets",
                z.len(),
                targets.len()
            )));
        }
        let n = z.len() as f64;
        let loss = z
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.rg(logits);
        let op = Op::BceWithLogits { logits, targets: targets.to_vec() };
        self.push(Tensor::scalar(loss), op, rg, "bce_with_logits")
    }

    /// Gradient of the consumed loss with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).ok()
    }

    /// Adds the gradients of every parameter leaf into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, self.grads.get(i).and_then(|g| g.as_ref())) {
                if node.requires_grad {
                    store.accumulate_grad(*id, g)?;
                }
            }
        }
        Ok(())
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(NnError::GraphConsumed);
        }
        let ls = self.value(loss);
        if !ls.is_scalar() {
            return Err(NnError::NotScalar(ls.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (a, b) in existing.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(dy);
                    continue;
                }
                Op::Conv3d { x, w, b } => {
                    let dyt = Tensor::new(node.value.shape().to_vec(), dy.clone())?;
                    let need_w = rg(*w) || rg(*b);
                    let g = kernels::conv3d_backward(val(*x), val(*w), val(*b), &dyt, rg(*x), need_w)?;
                    if let Some(dx) = g.dx {
                        acc(&mut grads, *x, dx.into_data());
                    }
                    if rg(*w) {
                        acc(&mut grads, *w, g.dw.expect("dw").into_data());
                    }
                    if rg(*b) {
                        acc(&mut grads, *b, g.db.expect("db").into_data());
                    }
                }
                Op::MaxPool3d { x, argmax } => {
                    let mut dx = vec![0.0; val(*x).len()];
                    for (g, &j) in dy.iter().zip(argmax) {
                        dx[j] += g;
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                    let (c, inner, n) = kernels::channel_layout(node.value.shape())?;
                    let gv = val(*gamma).data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut sum_dxhat = vec![0.0; c];
                    let mut sum_dxhat_xhat = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let o = (b * c + ch) * inner;
                            for j in o..o + inner {
                                dgamma[ch] += dy[j] * xhat[j];
                                dbeta[ch] += dy[j];
                                let dh = dy[j] * gv[ch];
                                sum_dxhat[ch] += dh;
                                sum_dxhat_xhat[ch] += dh * xhat[j];
                            }
                        }
                    }
                    if rg(*x) {
                        let m = (n * inner) as f64;
                        let mut dx = vec![0.0; dy.len()];
                        for b in 0..n {
                            for ch in 0..c {
                                let o = (b * c + ch) * inner;
                                for j in o..o + inner {
                                    let dh = dy[j] * gv[ch];
                                    dx[j] = if *train {
                                        inv_std[ch] / m * (m * dh - sum_dxhat[ch] - xhat[j] * sum_dxhat_xhat[ch])
                                    } else {
                                        dh * inv_std[ch]
                                    };
                                }
                            }
                        }
                        acc(&mut grads, *x, dx);
                    }
                    if rg(*gamma) {
                        acc(&mut grads, *gamma, dgamma);
                    }
                    if rg(*beta) {
                        acc(&mut grads, *beta, dbeta);
                    }
                }
                Op::Prelu { x, slope } => {
                    let (c, inner, n) = kernels::channel_layout(node.value.shape())?;
                    let xd = val(*x).data();
                    let s = val(*slope).data();
                    let mut dx = vec![0.0; dy.len()];
                    let mut ds = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let o = (b * c + ch) * inner;
                            for j in o..o + inner {
                                if xd[j] < 0.0 {
                                    dx[j] = s[ch] * dy[j];
                                    ds[ch] += xd[j] * dy[j];
                                } else {
                                    dx[j] = dy[j];
                                }
                            }
                        }
                    }
                    if rg(*x) {
                        acc(&mut grads, *x, dx);
                    }
                    if rg(*slope) {
                        acc(&mut grads, *slope, ds);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let dx = val(*x).data().iter().zip(&dy).map(|(&v, &g)| if v < 0.0 { slope * g } else { g }).collect();
                    acc(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let dyt = Tensor::new(node.value.shape().to_vec(), dy.clone())?;
                    let (dx, dwb) = kernels::linear_backward(val(*x), val(*w), &dyt, rg(*x), rg(*w) || rg(*b));
                    if let Some(dx) = dx {
                        acc(&mut grads, *x, dx);
                    }
                    if let Some((dw, db)) = dwb {
                        if rg(*w) {
                            acc(&mut grads, *w, dw);
                        }
                        if rg(*b) {
                            acc(&mut grads, *b, db);
                        }
                    }
                }
                Op::Reshape { x } => acc(&mut grads, *x, dy),
                Op::Add(a, b) => {
                    if rg(*a) {
                        acc(&mut grads, *a, dy.clone());
                    }
                    if rg(*b) {
                        acc(&mut grads, *b, dy);
                    }
                }
                Op::Sub(a, b) => {
                    if rg(*a) {
                        acc(&mut grads, *a, dy.clone());
                    }
                    if rg(*b) {
                        acc(&mut grads, *b, dy.iter().map(|g| -g).collect());
                    }
                }
                Op::Mul(a, b) => {
                    if rg(*a) {
                        let g = dy.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                        acc(&mut grads, *a, g);
                    }
                    if rg(*b) {
                        let g = dy.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Scale(a, k) => acc(&mut grads, *a, dy.iter().map(|g| g * k).collect()),
                Op::AddRow { x, row } => {
                    let f = val(*row).len();
                    if rg(*row) {
                        let mut dr = vec![0.0; f];
                        for chunk in dy.chunks(f) {
                            for (a, b) in dr.iter_mut().zip(chunk) {
                                *a += b;
                            }
                        }
                        acc(&mut grads, *row, dr);
                    }
                    if rg(*x) {
                        acc(&mut grads, *x, dy);
                    }
                }
                Op::MulRow { x, row } => {
                    let r = val(*row).data();
                    let f = r.len();
                    if rg(*row) {
                        let mut dr = vec![0.0; f];
                        for (chunk, xc) in dy.chunks(f).zip(val(*x).data().chunks(f)) {
                            for ((a, g), xv) in dr.iter_mut().zip(chunk).zip(xc) {
                                *a += g * xv;
                            }
                        }
                        acc(&mut grads, *row, dr);
                    }
                    if rg(*x) {
                        let dx = dy.iter().enumerate().map(|(j, g)| g * r[j % f]).collect();
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Sum(a) => acc(&mut grads, *a, vec![dy[0]; val(*a).len()]),
                Op::Mean(a) => {
                    let n = val(*a).len();
                    acc(&mut grads, *a, vec![dy[0] / n as f64; n]);
                }
                Op::RowSqNorm(a) => {
                    let k = val(*a).shape()[1];
                    let g = val(*a).data().iter().enumerate().map(|(j, v)| 2.0 * v * dy[j / k]).collect();
                    acc(&mut grads, *a, g);
                }
                Op::Focal { d, a, c } => {
                    let k = val(*d).shape()[1];
                    let mut g = Vec::with_capacity(val(*d).len());
                    for (r, row) in val(*d).data().chunks(k).enumerate() {
                        let e = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let (_, factor) = focal_value_and_factor(e, *a, *c);
                        g.extend(row.iter().map(|v| factor * v * dy[r]));
                    }
                    acc(&mut grads, *d, g);
                }
                Op::BceWithLogits { logits, targets } => {
                    let n = targets.len() as f64;
                    let g = val(*logits)
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&z, &t)| (sigmoid(z) - t) / n * dy[0])
                        .collect();
                    acc(&mut grads, *logits, g);
                }
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(NnError::NonFinite(format!("backward pass (node {i})")));
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}
