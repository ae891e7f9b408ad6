//! Reverse-mode differentiation on a recorded tape.
//!
//! Every operation appends a node holding its forward value and the inputs
//! its adjoint rule needs. `backward` walks the nodes in reverse creation
//! order (a valid reverse topological order, since inputs always precede
//! their consumers) and accumulates gradients additively into each node.
//!
//! Nodes created with [`Tape::constant`] and everything computed purely from
//! constants are detached: no adjoint is ever propagated into them.

use super::Matrix;
use crate::error::{dim_err, param_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward nonlinearity used for spike generation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpikeFn {
    /// Heaviside step (fires at exactly zero) with the arctan surrogate
    /// `alpha / (2 (1 + (pi/2 * alpha * x)^2))` as its derivative.
    Surrogate { alpha: f64 },
    /// Smooth `sigmoid(slope * x)` with its true derivative; used by the
    /// differentiable clone in gradient checks.
    Sigmoid { slope: f64 },
}

impl SpikeFn {
    pub fn forward(self, x: f64) -> f64 {
        match self {
            SpikeFn::Surrogate { .. } => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            SpikeFn::Sigmoid { slope } => sigmoid(slope * x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            SpikeFn::Surrogate { alpha } => arctan_surrogate(x, alpha),
            SpikeFn::Sigmoid { slope } => {
                let s = sigmoid(slope * x);
                slope * s * (1.0 - s)
            }
        }
    }
}

/// Arctan surrogate derivative of the Heaviside step.
pub fn arctan_surrogate(x: f64, alpha: f64) -> f64 {
    let z = std::f64::consts::FRAC_PI_2 * alpha * x;
    alpha / (2.0 * (1.0 + z * z))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Geometry of a batched 3x3 same-padding convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Per-channel statistics observed by a batch-normalization node.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Number of values each channel statistic was computed over.
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRowBroadcast(Var, Var),
    MulScalarVar(Var, Var),
    Sum(Var),
    SumRows(Var),
    Powf(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Spike(Var, SpikeFn),
    SoftmaxRows(Var, f64),
    CrossEntropy { logits: Var, probs: Matrix, labels: Vec<usize> },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    Conv3x3 { x: Var, w: Var, b: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, channels: usize, hw: usize, mean: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    AvgPool2 { x: Var, channels: usize, height: usize, width: usize },
    Gap { x: Var, channels: usize, hw: usize },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Recording of a differentiable computation. Single-owner.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
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

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input (parameter or probe).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Detached input; never receives gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Accumulated gradient, if any backward pass reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Accumulated gradient, zeros when `v` is not on any path to a loss.
    pub fn grad_or_zeros(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shape(v);
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    // ---- elementary ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        let ng = self.ng(a);
        self.push(value, Op::AddScalar(a), ng)
    }

    /// `a + 1 * row` where `row` is 1 x cols(a).
    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return dim_err(format!("row broadcast of {:?} onto {r}x{c}", self.shape(row)));
        }
        let mut value = self.value(a).clone();
        let rv = self.value(row).data().to_vec();
        for i in 0..r {
            for (o, b) in value.row_mut(i).iter_mut().zip(&rv) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(value, Op::AddRowBroadcast(a, row), ng))
    }

    /// `a * s` where `s` is a 1x1 node.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return dim_err(format!("scalar factor must be 1x1, got {:?}", self.shape(s)));
        }
        let k = self.value(s).item();
        let value = self.value(a).scale(k);
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(value, Op::MulScalarVar(a, s), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums as a column vector.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let sums: Vec<f64> = (0..m.rows()).map(|r| m.row(r).iter().sum()).collect();
        let value = Matrix::column_vector(&sums);
        let ng = self.ng(a);
        self.push(value, Op::SumRows(a), ng)
    }

    /// Elementwise power; inputs must be positive when `p` is fractional.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let value = self.value(a).map(|v| v.powf(p));
        let ng = self.ng(a);
        self.push(value, Op::Powf(a, p), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|v| if v >= 0.0 { v } else { slope * v });
        let ng = self.ng(a);
        self.push(value, Op::LeakyRelu(a, slope), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    /// Spike generation from a threshold-shifted membrane `x = u - v_th`.
    pub fn spike(&mut self, a: Var, f: SpikeFn) -> Var {
        let value = self.value(a).map(|v| f.forward(v));
        let ng = self.ng(a);
        self.push(value, Op::Spike(a, f), ng)
    }

    /// Row-wise `softmax(x / tau)`.
    pub fn softmax_rows(&mut self, a: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return param_err(format!("softmax temperature must be positive, got {tau}"));
        }
        let m = self.value(a);
        let mut value = Matrix::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            let probs = super::softmax_temperature(m.row(r), tau)?;
            value.row_mut(r).copy_from_slice(&probs);
        }
        let ng = self.ng(a);
        Ok(self.push(value, Op::SoftmaxRows(a, tau), ng))
    }

    /// Mean cross-entropy of row-wise logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let m = self.value(logits);
        if m.rows() != labels.len() {
            return dim_err(format!("{} logit rows for {} labels", m.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= m.cols()) {
            return dim_err(format!("label {bad} out of range for {} classes", m.cols()));
        }
        let mut probs = Matrix::zeros(m.rows(), m.cols());
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let p = super::softmax_temperature(m.row(r), 1.0)?;
            loss -= super::log_softmax_at(m.row(r), label);
            probs.row_mut(r).copy_from_slice(&p);
        }
        loss /= labels.len().max(1) as f64;
        let ng = self.ng(logits);
        Ok(self.push(Matrix::scalar(loss), Op::CrossEntropy { logits, probs, labels: labels.to_vec() }, ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let m = self.value(a);
        if start + len > m.cols() {
            return dim_err(format!("column slice {start}..{} of {} columns", start + len, m.cols()));
        }
        let mut value = Matrix::zeros(m.rows(), len);
        for r in 0..m.rows() {
            value.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceCols { x: a, start }, ng))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let m = self.value(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= m.rows()) {
            return dim_err(format!("row {bad} out of range for {} rows", m.rows()));
        }
        let mut value = Matrix::zeros(rows.len(), m.cols());
        for (o, &r) in rows.iter().enumerate() {
            value.row_mut(o).copy_from_slice(m.row(r));
        }
        let ng = self.ng(a);
        Ok(self.push(value, Op::GatherRows { x: a, rows: rows.to_vec() }, ng))
    }

    /// Stacks nodes vertically; all must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat of zero parts");
        };
        let cols = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            if m.cols() != cols {
                return dim_err(format!("concat of {cols}-column and {}-column parts", m.cols()));
            }
            rows += m.rows();
            data.extend_from_slice(m.data());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    // ---- spatial ops ----------------------------------------------------

    /// Batched 3x3 convolution with zero padding 1 and stride 1.
    ///
    /// `x` is `batch x (in_channels*h*w)`, `w` is `out_channels x (in_channels*9)`
    /// and `b` is `1 x out_channels`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let hw = geom.height * geom.width;
        if self.shape(x) != (geom.batch, geom.in_channels * hw) {
            return dim_err(format!(
                "conv input {:?} does not match batch {} x {} channels x {}x{}",
                self.shape(x),
                geom.batch,
                geom.in_channels,
                geom.height,
                geom.width
            ));
        }
        if self.shape(w) != (geom.out_channels, geom.in_channels * 9) {
            return dim_err(format!("conv kernel {:?} for {}->{} channels", self.shape(w), geom.in_channels, geom.out_channels));
        }
        if self.shape(b) != (1, geom.out_channels) {
            return dim_err(format!("conv bias {:?} for {} channels", self.shape(b), geom.out_channels));
        }
        let value = conv3x3_forward(self.value(x), self.value(w), self.value(b), geom);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(value, Op::Conv3x3 { x, w, b, geom }, ng))
    }

    /// Per-channel normalization of `x` (`batch x (channels*hw)`).
    ///
    /// With `running = None` batch statistics over all batch rows and spatial
    /// positions are used and returned; otherwise the given `(mean, var)` are
    /// treated as constants.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        channels: usize,
        hw: usize,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BnBatchStats>)> {
        let (rows, cols) = self.shape(x);
        if cols != channels * hw {
            return dim_err(format!("batch norm input has {cols} columns, expected {channels}x{hw}"));
        }
        if self.shape(gamma) != (1, channels) || self.shape(beta) != (1, channels) {
            return dim_err(format!("batch norm affine parameters must be 1x{channels}"));
        }
        let xm = self.value(x);
        let count = rows * hw;
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != channels || v.len() != channels {
                    return dim_err(format!("running stats must have {channels} entries"));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for r in 0..rows {
                    let row = xm.row(r);
                    for c in 0..channels {
                        mean[c] += row[c * hw..(c + 1) * hw].iter().sum::<f64>();
                    }
                }
                for m in &mut mean {
                    *m /= count as f64;
                }
                for r in 0..rows {
                    let row = xm.row(r);
                    for c in 0..channels {
                        let mu = mean[c];
                        var[c] += row[c * hw..(c + 1) * hw].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                }
                for v in &mut var {
                    *v /= count as f64;
                }
                let stats = BnBatchStats { mean: mean.clone(), var: var.clone(), count };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut value = xm.clone();
        for r in 0..rows {
            let row = value.row_mut(r);
            for c in 0..channels {
                let (mu, is, gc, bc) = (mean[c], inv_std[c], g[c], bt[c]);
                for v in &mut row[c * hw..(c + 1) * hw] {
                    *v = gc * (*v - mu) * is + bc;
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let batch_stats = stats.is_some();
        let var_out = self.push(value, Op::BatchNorm { x, gamma, beta, channels, hw, mean, inv_std, batch_stats }, ng);
        Ok((var_out, stats))
    }

    /// 2x2 average pooling with stride 2; a 1x1 map passes through unchanged.
    pub fn avg_pool2(&mut self, x: Var, channels: usize, height: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if cols != channels * height * width {
            return dim_err(format!("pool input has {cols} columns, expected {channels}x{height}x{width}"));
        }
        if height == 1 && width == 1 {
            return Ok(x);
        }
        if !height.is_multiple_of(2) || !width.is_multiple_of(2) {
            return dim_err(format!("2x2 pooling needs even spatial dims, got {height}x{width}"));
        }
        let (oh, ow) = (height / 2, width / 2);
        let xm = self.value(x);
        let mut value = Matrix::zeros(rows, channels * oh * ow);
        for r in 0..rows {
            let src = xm.row(r);
            let dst = value.row_mut(r);
            for c in 0..channels {
                for y in 0..oh {
                    for xx in 0..ow {
                        let base = c * height * width;
                        let s = src[base + 2 * y * width + 2 * xx]
                            + src[base + 2 * y * width + 2 * xx + 1]
                            + src[base + (2 * y + 1) * width + 2 * xx]
                            + src[base + (2 * y + 1) * width + 2 * xx + 1];
                        dst[c * oh * ow + y * ow + xx] = 0.25 * s;
                    }
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(value, Op::AvgPool2 { x, channels, height, width }, ng))
    }

    /// Global average pooling: `batch x (channels*hw)` to `batch x channels`.
    pub fn gap(&mut self, x: Var, channels: usize, hw: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if cols != channels * hw {
            return dim_err(format!("GAP input has {cols} columns, expected {channels}x{hw}"));
        }
        let xm = self.value(x);
        let mut value = Matrix::zeros(rows, channels);
        for r in 0..rows {
            let src = xm.row(r);
            for c in 0..channels {
                value.set(r, c, src[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(value, Op::Gap { x, channels, hw }, ng))
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates `d loss / d node` into every node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            match &mut self.grads[i] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, d: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.add_assign(&d),
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    send(*a, g.matmul(&bv.transpose()).expect("matmul adjoint"));
                }
                if self.ng(*b) {
                    send(*b, av.transpose().matmul(g).expect("matmul adjoint"));
                }
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    send(*a, g.zip_map(self.value(*b), |d, y| d * y));
                }
                if self.ng(*b) {
                    send(*b, g.zip_map(self.value(*a), |d, x| d * x));
                }
            }
            Op::Scale(a, k) => send(*a, g.scale(*k)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::AddRowBroadcast(a, row) => {
                send(*a, g.clone());
                if self.ng(*row) {
                    let mut acc = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in acc.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    send(*row, acc);
                }
            }
            Op::MulScalarVar(a, s) => {
                let k = self.value(*s).item();
                if self.ng(*a) {
                    send(*a, g.scale(k));
                }
                if self.ng(*s) {
                    let dot: f64 = g.data().iter().zip(self.value(*a).data()).map(|(d, x)| d * x).sum();
                    send(*s, Matrix::scalar(dot));
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                send(*a, Matrix::filled(r, c, g.item()));
            }
            Op::SumRows(a) => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    let gi = g.get(i, 0);
                    d.row_mut(i).iter_mut().for_each(|v| *v = gi);
                }
                send(*a, d);
            }
            Op::Powf(a, p) => send(*a, g.zip_map(self.value(*a), |d, x| d * p * x.powf(p - 1.0))),
            Op::Relu(a) => send(*a, g.zip_map(self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 })),
            Op::LeakyRelu(a, slope) => {
                send(*a, g.zip_map(self.value(*a), |d, x| if x >= 0.0 { d } else { slope * d }))
            }
            Op::Sigmoid(a) => send(*a, g.zip_map(&node.value, |d, y| d * y * (1.0 - y))),
            Op::Spike(a, f) => send(*a, g.zip_map(self.value(*a), |d, x| d * f.derivative(x))),
            Op::SoftmaxRows(a, tau) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, &p), &q) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - dot) / tau;
                    }
                }
                send(*a, d);
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let scale = g.item() / labels.len().max(1) as f64;
                let mut d = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    let v = d.get(r, l) - 1.0;
                    d.set(r, l, v);
                }
                send(*logits, d.scale(scale));
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.shape(*x);
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                send(*x, d);
            }
            Op::GatherRows { x, rows } => {
                let (r, c) = self.shape(*x);
                let mut d = Matrix::zeros(r, c);
                for (o, &src) in rows.iter().enumerate() {
                    for (a, b) in d.row_mut(src).iter_mut().zip(g.row(o)) {
                        *a += b;
                    }
                }
                send(*x, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.ng(p) {
                        let slice = g.data()[offset * c..(offset + r) * c].to_vec();
                        send(p, Matrix::from_vec(r, c, slice).expect("concat adjoint"));
                    }
                    offset += r;
                }
            }
            Op::Conv3x3 { x, w, b, geom } => {
                let (dx, dw, db) = conv3x3_backward(self.value(*x), self.value(*w), g, *geom, self.ng(*x), self.ng(*w));
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                if let Some(dw) = dw {
                    send(*w, dw);
                }
                if self.ng(*b) {
                    send(*b, db);
                }
            }
            Op::BatchNorm { x, gamma, beta, channels, hw, mean, inv_std, batch_stats } => {
                let xm = self.value(*x);
                let gm = self.value(*gamma).data();
                let rows = xm.rows();
                let n = (rows * hw) as f64;
                let mut dgamma = vec![0.0; *channels];
                let mut dbeta = vec![0.0; *channels];
                for r in 0..rows {
                    let (xr, gr) = (xm.row(r), g.row(r));
                    for c in 0..*channels {
                        for k in c * hw..(c + 1) * hw {
                            let xhat = (xr[k] - mean[c]) * inv_std[c];
                            dgamma[c] += gr[k] * xhat;
                            dbeta[c] += gr[k];
                        }
                    }
                }
                if self.ng(*x) {
                    let mut dx = Matrix::zeros(rows, xm.cols());
                    for r in 0..rows {
                        let (xr, gr) = (xm.row(r), g.row(r));
                        let dr = dx.row_mut(r);
                        for c in 0..*channels {
                            let is = inv_std[c];
                            for k in c * hw..(c + 1) * hw {
                                dr[k] = if *batch_stats {
                                    let xhat = (xr[k] - mean[c]) * is;
                                    gm[c] * is / n * (n * gr[k] - dbeta[c] - xhat * dgamma[c])
                                } else {
                                    gm[c] * is * gr[k]
                                };
                            }
                        }
                    }
                    send(*x, dx);
                }
                send(*gamma, Matrix::row_vector(&dgamma));
                send(*beta, Matrix::row_vector(&dbeta));
            }
            Op::AvgPool2 { x, channels, height, width } => {
                let (oh, ow) = (height / 2, width / 2);
                let (r, c) = self.shape(*x);
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    let gr = g.row(i);
                    let dr = d.row_mut(i);
                    for ch in 0..*channels {
                        for y in 0..*height {
                            for xx in 0..*width {
                                dr[ch * height * width + y * width + xx] = 0.25 * gr[ch * oh * ow + (y / 2) * ow + xx / 2];
                            }
                        }
                    }
                }
                send(*x, d);
            }
            Op::Gap { x, channels, hw } => {
                let (r, c) = self.shape(*x);
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    let dr = d.row_mut(i);
                    for ch in 0..*channels {
                        let v = g.get(i, ch) / *hw as f64;
                        dr[ch * hw..(ch + 1) * hw].iter_mut().for_each(|o| *o = v);
                    }
                }
                send(*x, d);
            }
        }
    }
}

fn conv3x3_forward(x: &Matrix, w: &Matrix, b: &Matrix, geom: ConvGeom) -> Matrix {
    let ConvGeom { batch, in_channels: cin, out_channels: cout, height: h, width: wd } = geom;
    let hw = h * wd;
    let mut out = Matrix::zeros(batch, cout * hw);
    for n in 0..batch {
        let src = x.row(n);
        let dst = out.row_mut(n);
        for co in 0..cout {
            let o = &mut dst[co * hw..(co + 1) * hw];
            o.iter_mut().for_each(|v| *v = b.data()[co]);
            for ci in 0..cin {
                let plane = &src[ci * hw..(ci + 1) * hw];
                if plane.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for tap in 0..9 {
                    let wv = w.get(co, ci * 9 + tap);
                    if wv == 0.0 {
                        continue;
                    }
                    let (dy, dx) = (tap as isize / 3 - 1, tap as isize % 3 - 1);
                    shift_accumulate(o, plane, h, wd, dy, dx, wv);
                }
            }
        }
    }
    out
}

/// `dst[y][x] += k * src[y+dy][x+dx]` over in-bounds positions.
#[inline]
fn shift_accumulate(dst: &mut [f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize, k: f64) {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy.max(0)) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx.max(0)) as usize;
    if y0 >= y1 || x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let d = &mut dst[y * w + x0..y * w + x1];
        let s = &src[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
        for (a, &v) in d.iter_mut().zip(s) {
            *a += k * v;
        }
    }
}

/// Sum over in-bounds positions of `g[y][x] * src[y+dy][x+dx]`.
#[inline]
fn shift_dot(g: &[f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy.max(0)) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx.max(0)) as usize;
    let mut acc = 0.0;
    for y in y0..y1.max(y0) {
        let sy = (y as isize + dy) as usize;
        let gr = &g[y * w + x0..y * w + x1.max(x0)];
        let s = &src[sy * w + (x0 as isize + dx) as usize..sy * w + (x1.max(x0) as isize + dx) as usize];
        acc += gr.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
    }
    acc
}

type ConvGrads = (Option<Matrix>, Option<Matrix>, Matrix);

fn conv3x3_backward(x: &Matrix, w: &Matrix, g: &Matrix, geom: ConvGeom, want_dx: bool, want_dw: bool) -> ConvGrads {
    let ConvGeom { batch, in_channels: cin, out_channels: cout, height: h, width: wd } = geom;
    let hw = h * wd;
    let mut dx = want_dx.then(|| Matrix::zeros(batch, cin * hw));
    let mut dw = want_dw.then(|| Matrix::zeros(cout, cin * 9));
    let mut db = Matrix::zeros(1, cout);
    for n in 0..batch {
        let src = x.row(n);
        let gn = g.row(n);
        for co in 0..cout {
            let gplane = &gn[co * hw..(co + 1) * hw];
            db.data_mut()[co] += gplane.iter().sum::<f64>();
            if gplane.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ci in 0..cin {
                let plane = &src[ci * hw..(ci + 1) * hw];
                for tap in 0..9 {
                    let (dy, ddx) = (tap as isize / 3 - 1, tap as isize % 3 - 1);
                    if let Some(dw) = dw.as_mut() {
                        let v = shift_dot(gplane, plane, h, wd, dy, ddx);
                        let idx = co * cin * 9 + ci * 9 + tap;
                        dw.data_mut()[idx] += v;
                    }
                    if let Some(dx) = dx.as_mut() {
                        let wv = w.get(co, ci * 9 + tap);
                        if wv != 0.0 {
                            let drow = dx.row_mut(n);
                            // out[y][x] reads in[y+dy][x+dx]; its adjoint writes back there.
                            shift_accumulate(&mut drow[ci * hw..(ci + 1) * hw], gplane, h, wd, -dy, -ddx, wv);
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}
