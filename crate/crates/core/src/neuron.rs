//! Leaky integrate-and-fire dynamics and the conv → batch-norm → spike node.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::numgrad::{arctan_surrogate, BnBatchStats, ConvGeom, Matrix, Rng, SpikeFn, Tape, Var};
use crate::Mode;

pub const DEFAULT_TAU_DECAY: f64 = 0.5;
pub const DEFAULT_V_TH: f64 = 1.0;
pub const SURROGATE_ALPHA: f64 = 2.0;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Arctan surrogate `dΘ/du` evaluated at `x = u - v_th` with the default alpha.
pub fn surrogate_grad(x: f64) -> f64 {
    arctan_surrogate(x, SURROGATE_ALPHA)
}

/// Neuron constants shared by every node of a network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    pub tau_decay: f64,
    pub v_th: f64,
    #[serde(skip, default = "default_spike_fn")]
    pub spike_fn: SpikeFn,
}

fn default_spike_fn() -> SpikeFn {
    SpikeFn::Surrogate { alpha: SURROGATE_ALPHA }
}

impl Default for LifParams {
    fn default() -> Self {
        Self { tau_decay: DEFAULT_TAU_DECAY, v_th: DEFAULT_V_TH, spike_fn: default_spike_fn() }
    }
}

/// Membrane and last-spike state of a population of LIF neurons.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState {
    pub membrane: Vec<f64>,
    pub last_spike: Vec<f64>,
    pub tau_decay: f64,
    pub v_th: f64,
}

impl LifState {
    pub fn new(size: usize, tau_decay: f64, v_th: f64) -> Self {
        Self { membrane: vec![0.0; size], last_spike: vec![0.0; size], tau_decay, v_th }
    }

    pub fn reset(&mut self) {
        self.membrane.iter_mut().for_each(|v| *v = 0.0);
        self.last_spike.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// One LIF update with soft reset: `u = tau*u_prev + C - v_th*s_prev`,
/// `s = [u >= v_th]`. Returns the emitted spikes.
pub fn lif_step(state: &mut LifState, current: &[f64]) -> Result<Vec<f64>> {
    if current.len() != state.membrane.len() {
        return dim_err(format!(
            "LIF input has {} values for {} neurons",
            current.len(),
            state.membrane.len()
        ));
    }
    let (tau, vth) = (state.tau_decay, state.v_th);
    for ((u, s), &c) in state.membrane.iter_mut().zip(state.last_spike.iter_mut()).zip(current) {
        *u = tau * *u + c - vth * *s;
        *s = if *u - vth >= 0.0 { 1.0 } else { 0.0 };
    }
    Ok(state.last_spike.clone())
}

/// Membrane state of a node living on a tape; `None` means all-zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct LifTapeState {
    pub membrane: Option<Var>,
    pub spike: Option<Var>,
}

/// Tape version of [`lif_step`]; gradients reach `current`, the previous
/// membrane and (through the reset term) the previous spikes.
pub fn lif_step_tape(tape: &mut Tape, state: &mut LifTapeState, current: Var, params: &LifParams) -> Result<Var> {
    let mut u = match state.membrane {
        Some(prev) => {
            let decayed = tape.scale(prev, params.tau_decay);
            tape.add(decayed, current)?
        }
        None => current,
    };
    if let Some(s_prev) = state.spike {
        let reset = tape.scale(s_prev, params.v_th);
        u = tape.sub(u, reset)?;
    }
    let shifted = tape.add_scalar(u, -params.v_th);
    let s = tape.spike(shifted, params.spike_fn);
    state.membrane = Some(u);
    state.spike = Some(s);
    Ok(s)
}

/// Binary event frames indexed `(t, c, h, w)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpikeTensor {
    dims: [usize; 4],
    data: Vec<u8>,
}

impl SpikeTensor {
    pub fn zeros(t: usize, c: usize, h: usize, w: usize) -> Self {
        Self { dims: [t, c, h, w], data: vec![0; t * c * h * w] }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<u8>) -> Result<Self> {
        if dims.contains(&0) {
            return dim_err(format!("spike tensor dims must be positive, got {dims:?}"));
        }
        if dims.iter().product::<usize>() != data.len() {
            return dim_err(format!("spike tensor {dims:?} needs {} values, got {}", dims.iter().product::<usize>(), data.len()));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(crate::Error::Data("spike values must be 0 or 1".into()));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn timesteps(&self) -> usize {
        self.dims[0]
    }

    pub fn frame_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [u8] {
        let n = self.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn frame_f64(&self, t: usize) -> Vec<f64> {
        self.frame(t).iter().map(|&v| v as f64).collect()
    }

    #[inline]
    pub fn index(&self, t: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cc, h, w] = self.dims;
        ((t * cc + c) * h + y) * w + x
    }

    pub fn get(&self, t: usize, c: usize, y: usize, x: usize) -> u8 {
        self.data[self.index(t, c, y, x)]
    }

    pub fn set(&mut self, t: usize, c: usize, y: usize, x: usize, v: bool) {
        let i = self.index(t, c, y, x);
        self.data[i] = v as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }
}

/// Per-channel batch normalization parameters and running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Matrix::ones(1, channels),
            beta: Matrix::zeros(1, channels),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    /// Folds one batch observation into the running statistics (unbiased variance).
    pub fn update_running(&mut self, stats: &BnBatchStats) {
        let m = self.momentum;
        let correction = if stats.count > 1 { stats.count as f64 / (stats.count - 1) as f64 } else { 1.0 };
        for c in 0..self.running_mean.len() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * stats.var[c] * correction;
        }
    }
}

/// Convolution (3x3, padding 1) → batch norm → LIF.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBnSnNode {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `out_channels x (in_channels * 9)`, taps in row-major `(ky, kx)` order.
    pub kernel: Matrix,
    pub bias: Matrix,
    pub bn: BatchNorm,
}

/// Parameter handles of a node bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct NodeVars {
    pub kernel: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl ConvBnSnNode {
    /// Kaiming-uniform style kernel init, zero bias, identity BN.
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut Rng) -> Self {
        let fan_in = (in_channels * 9) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let kernel: Vec<f64> = (0..out_channels * in_channels * 9).map(|_| rng.uniform_range(-bound, bound)).collect();
        Self {
            in_channels,
            out_channels,
            kernel: Matrix::from_vec(out_channels, in_channels * 9, kernel).expect("kernel shape"),
            bias: Matrix::zeros(1, out_channels),
            bn: BatchNorm::new(out_channels),
        }
    }

    pub fn zeroed(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: Matrix::zeros(out_channels, in_channels * 9),
            bias: Matrix::zeros(1, out_channels),
            bn: BatchNorm::new(out_channels),
        }
    }

    /// Registers parameters on the tape; detached unless `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> NodeVars {
        let mut reg = |m: &Matrix| if trainable { tape.leaf(m.clone()) } else { tape.constant(m.clone()) };
        NodeVars { kernel: reg(&self.kernel), bias: reg(&self.bias), gamma: reg(&self.bn.gamma), beta: reg(&self.bn.beta) }
    }

    pub fn params(&self) -> Vec<&Matrix> {
        vec![&self.kernel, &self.bias, &self.bn.gamma, &self.bn.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.kernel, &mut self.bias, &mut self.bn.gamma, &mut self.bn.beta]
    }
}

impl NodeVars {
    pub fn as_vec(&self) -> Vec<Var> {
        vec![self.kernel, self.bias, self.gamma, self.beta]
    }
}

/// Output of a node pass; `bn_stats` is present in train mode.
pub struct NodeOutput {
    pub spikes: Var,
    pub bn_stats: Option<BnBatchStats>,
}

/// Batched conv → BN → LIF on `input` (`batch x (in_channels*h*w)`).
#[allow(clippy::too_many_arguments)]
pub fn conv_bn_sn_forward(
    tape: &mut Tape,
    node: &ConvBnSnNode,
    vars: &NodeVars,
    input: Var,
    height: usize,
    width: usize,
    mode: Mode,
    lif: &LifParams,
    state: &mut LifTapeState,
) -> Result<NodeOutput> {
    let (batch, cols) = tape.shape(input);
    if cols != node.in_channels * height * width {
        return dim_err(format!(
            "node expects {} input channels at {height}x{width}, got {cols} values per sample",
            node.in_channels
        ));
    }
    let geom = ConvGeom { batch, in_channels: node.in_channels, out_channels: node.out_channels, height, width };
    let conv = tape.conv3x3(input, vars.kernel, vars.bias, geom)?;
    let running = match mode {
        Mode::Train => None,
        Mode::Eval => Some((node.bn.running_mean.as_slice(), node.bn.running_var.as_slice())),
    };
    let (normed, bn_stats) =
        tape.batch_norm(conv, vars.gamma, vars.beta, node.out_channels, height * width, node.bn.eps, running)?;
    let spikes = lif_step_tape(tape, state, normed, lif)?;
    Ok(NodeOutput { spikes, bn_stats })
}

/// Source node pass: [`conv_bn_sn_forward`] followed by 2x2 average pooling.
/// Returns `(pooled, raw spikes)`.
#[allow(clippy::too_many_arguments)]
pub fn source_forward(
    tape: &mut Tape,
    node: &ConvBnSnNode,
    vars: &NodeVars,
    input: Var,
    height: usize,
    width: usize,
    mode: Mode,
    lif: &LifParams,
    state: &mut LifTapeState,
) -> Result<(Var, NodeOutput)> {
    if !(height == 1 && width == 1) && (!height.is_multiple_of(2) || !width.is_multiple_of(2)) {
        return dim_err(format!("source node needs even spatial dims, got {height}x{width}"));
    }
    let out = conv_bn_sn_forward(tape, node, vars, input, height, width, mode, lif, state)?;
    let pooled = tape.avg_pool2(out.spikes, node.out_channels, height, width)?;
    Ok((pooled, out))
}

/// Single-sample convenience wrapper: runs one node step on a `(C_in, H, W)`
/// map with a fresh tape and the supplied membrane state.
pub fn conv_bn_sn_single(
    node: &ConvBnSnNode,
    input: &[f64],
    height: usize,
    width: usize,
    mode: Mode,
    lif: &LifParams,
    state: &mut LifState,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = node.bind(&mut tape, false);
    let x = tape.constant(Matrix::from_vec(1, input.len(), input.to_vec())?);
    let n = node.out_channels * height * width;
    if state.membrane.len() != n {
        return dim_err(format!("LIF state has {} neurons, node output has {n}", state.membrane.len()));
    }
    let mut ts = LifTapeState {
        membrane: Some(tape.constant(Matrix::from_vec(1, n, state.membrane.clone())?)),
        spike: Some(tape.constant(Matrix::from_vec(1, n, state.last_spike.clone())?)),
    };
    let lif = LifParams { tau_decay: state.tau_decay, v_th: state.v_th, ..*lif };
    let out = conv_bn_sn_forward(&mut tape, node, &vars, x, height, width, mode, &lif, &mut ts)?;
    state.membrane = tape.value(ts.membrane.expect("membrane")).data().to_vec();
    state.last_spike = tape.value(out.spikes).data().to_vec();
    Ok(state.last_spike.clone())
}
