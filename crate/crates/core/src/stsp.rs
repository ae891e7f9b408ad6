//! Spatio-temporal structural plasticity: per-timestep adjacency inference.
//!
//! Pipeline for one timestep and one sample:
//! hybrid state → GAP + projection → synaptic trace → multi-head pair scores
//! → symmetrization → temperature softmax (+ dropout) → momentum update of
//! `S` → per-row Top-k pruning into `Ŝ`.
//!
//! Every stage exists as a tape function (used by the network) and as a
//! plain-matrix wrapper that runs the same tape code on constants.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, param_err, Result};
use crate::numgrad::{Matrix, Rng, Tape, Var};
use crate::Mode;

pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_TAU_SOFTMAX: f64 = 0.01;
pub const DEFAULT_DROPOUT: f64 = 0.2;
pub const LEAKY_SLOPE: f64 = 0.01;

/// Learnable attention weights and the fixed attention hyperparameters.
///
/// Weights use the row-vector convention: `h = relu(gap · w_proj)` with
/// `w_proj` of shape `C x d_proj`, and head features `tr · w_head` with
/// `w_head` of shape `d_proj x d_proj`. Row `m` of `a` is the attention
/// vector of head `m`, length `2 * d_head`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w_proj: Matrix,
    pub w_head: Matrix,
    pub a: Matrix,
    pub heads: usize,
    pub tau_softmax: f64,
    pub dropout_p: f64,
}

impl AttentionParams {
    /// Uniform(±1/√fan_in) init with `d_proj = channels`.
    pub fn new(channels: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return param_err(format!("projection dim {channels} not divisible by {heads} heads"));
        }
        let d = channels;
        let dh = d / heads;
        let mut draw = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.uniform_range(-bound, bound)).collect();
            Matrix::from_vec(rows, cols, data).expect("shape")
        };
        let w_proj = draw(channels, d, channels);
        let w_head = draw(d, d, d);
        let a = draw(heads, 2 * dh, 2 * dh);
        Ok(Self { w_proj, w_head, a, heads, tau_softmax: DEFAULT_TAU_SOFTMAX, dropout_p: DEFAULT_DROPOUT })
    }

    pub fn d_proj(&self) -> usize {
        self.w_proj.cols()
    }

    pub fn d_head(&self) -> usize {
        self.d_proj() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_proj();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return param_err(format!("projection dim {d} not divisible by {} heads", self.heads));
        }
        if self.w_head.shape() != (d, d) {
            return dim_err(format!("w_head is {:?}, expected {d}x{d}", self.w_head.shape()));
        }
        if self.a.shape() != (self.heads, 2 * self.d_head()) {
            return dim_err(format!("attention vectors are {:?}, expected {}x{}", self.a.shape(), self.heads, 2 * self.d_head()));
        }
        if !(self.tau_softmax > 0.0) {
            return param_err(format!("softmax temperature must be positive, got {}", self.tau_softmax));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return param_err(format!("dropout probability must lie in [0, 1), got {}", self.dropout_p));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<AttentionVars> {
        let mut reg = |m: &Matrix| if trainable { tape.leaf(m.clone()) } else { tape.constant(m.clone()) };
        let w_proj = reg(&self.w_proj);
        let w_head = reg(&self.w_head);
        let a = reg(&self.a);
        let dh = self.d_head();
        let mut a_src = Vec::with_capacity(self.heads);
        let mut a_dst = Vec::with_capacity(self.heads);
        for m in 0..self.heads {
            let row = tape.gather_rows(a, &[m])?;
            let first = tape.slice_cols(row, 0, dh)?;
            let second = tape.slice_cols(row, dh, dh)?;
            a_src.push(tape.transpose(first));
            a_dst.push(tape.transpose(second));
        }
        Ok(AttentionVars { w_proj, w_head, a, a_src, a_dst, heads: self.heads, d_head: dh })
    }

    pub fn params(&self) -> Vec<&Matrix> {
        vec![&self.w_proj, &self.w_head, &self.a]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w_proj, &mut self.w_head, &mut self.a]
    }
}

/// Attention parameters bound to a tape; per-head halves of `a` as columns.
#[derive(Clone, Debug)]
pub struct AttentionVars {
    pub w_proj: Var,
    pub w_head: Var,
    pub a: Var,
    a_src: Vec<Var>,
    a_dst: Vec<Var>,
    heads: usize,
    d_head: usize,
}

impl AttentionVars {
    pub fn as_vec(&self) -> Vec<Var> {
        vec![self.w_proj, self.w_head, self.a]
    }
}

/// Structural hyperparameters of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StspConfig {
    pub nodes: usize,
    pub k: usize,
    pub beta: f64,
    pub lambda: f64,
}

impl StspConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes < 2 {
            return param_err(format!("a layer needs at least 2 nodes, got {}", self.nodes));
        }
        check_k(self.k, self.nodes)?;
        if !(0.0..=1.0).contains(&self.beta) {
            return param_err(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return param_err(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        Ok(())
    }
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return param_err(format!("top-k needs 1 <= k <= {n}, got {k}"));
    }
    Ok(())
}

/// Synaptic traces of all nodes of one sample (`N x d_proj`).
#[derive(Clone, Debug, PartialEq)]
pub struct TraceBank {
    pub traces: Matrix,
    pub lambda: f64,
}

impl TraceBank {
    pub fn new(nodes: usize, dim: usize, lambda: f64) -> Self {
        Self { traces: Matrix::zeros(nodes, dim), lambda }
    }
}

/// Dense synaptic matrix `S`, its pruned form `Ŝ`, and the update knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyState {
    pub s: Matrix,
    pub s_pruned: Matrix,
    pub beta: f64,
    pub k: usize,
}

impl AdjacencyState {
    /// `S⁽⁰⁾ = 1`; `Ŝ` starts as `Top_k(1)`.
    pub fn new(nodes: usize, beta: f64, k: usize) -> Result<Self> {
        check_k(k, nodes)?;
        let s = Matrix::ones(nodes, nodes);
        let (s_pruned, _) = topk_prune(&s, k)?;
        Ok(Self { s, s_pruned, beta, k })
    }
}

// ---- individual stages -------------------------------------------------

/// Node states seen by topology inference: the current source output at
/// index 0, previous-step outputs of the other nodes after it (zeros at
/// the first step).
pub fn hybrid_state(source_out: &Matrix, prev_outs: Option<&[Matrix]>, nodes: usize) -> Result<Vec<Matrix>> {
    let mut out = Vec::with_capacity(nodes);
    out.push(source_out.clone());
    match prev_outs {
        Some(prev) => {
            if prev.len() != nodes - 1 {
                return dim_err(format!("{} previous outputs for {} non-source nodes", prev.len(), nodes - 1));
            }
            for p in prev {
                if p.shape() != source_out.shape() {
                    return dim_err(format!("previous output {:?} vs source {:?}", p.shape(), source_out.shape()));
                }
                out.push(p.clone());
            }
        }
        None => out.extend((1..nodes).map(|_| Matrix::zeros(source_out.rows(), source_out.cols()))),
    }
    Ok(out)
}

/// `h = relu(GAP(state) · w_proj)` on a tape; `state` is `batch x (C*hw)`.
pub fn project_features_tape(tape: &mut Tape, state: Var, channels: usize, hw: usize, vars: &AttentionVars) -> Result<Var> {
    let gap = tape.gap(state, channels, hw)?;
    let z = tape.matmul(gap, vars.w_proj)?;
    Ok(tape.relu(z))
}

/// Plain form of [`project_features_tape`] for one `(C, H, W)` map.
pub fn project_features(state: &[f64], channels: usize, hw: usize, params: &AttentionParams) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false)?;
    let x = tape.constant(Matrix::from_vec(1, state.len(), state.to_vec())?);
    let h = project_features_tape(&mut tape, x, channels, hw, &vars)?;
    Ok(tape.value(h).data().to_vec())
}

/// `Tr ← λ·Tr + (1−λ)·h`; a missing previous trace is zero.
pub fn update_trace_tape(tape: &mut Tape, prev: Option<Var>, h: Var, lambda: f64) -> Result<Var> {
    let fresh = tape.scale(h, 1.0 - lambda);
    match prev {
        Some(p) => {
            let kept = tape.scale(p, lambda);
            tape.add(kept, fresh)
        }
        None => Ok(fresh),
    }
}

/// Updates trace row `i` of the bank in place and returns it.
pub fn update_trace(bank: &mut TraceBank, h: &[f64], i: usize) -> Result<Vec<f64>> {
    if i >= bank.traces.rows() {
        return dim_err(format!("node {i} out of range for {} traces", bank.traces.rows()));
    }
    if h.len() != bank.traces.cols() {
        return dim_err(format!("feature has {} entries, trace has {}", h.len(), bank.traces.cols()));
    }
    let mut tape = Tape::new();
    let prev = tape.constant(Matrix::row_vector(bank.traces.row(i)));
    let hv = tape.constant(Matrix::row_vector(h));
    let next = update_trace_tape(&mut tape, Some(prev), hv, bank.lambda)?;
    let row = tape.value(next).data().to_vec();
    bank.traces.row_mut(i).copy_from_slice(&row);
    Ok(row)
}

/// Dense per-head scores `e_m[i][j] = LeakyReLU(a_m · [h_im ‖ h_jm])` from
/// traces (`N x d_proj`).
pub fn attention_scores_tape(tape: &mut Tape, traces: Var, vars: &AttentionVars) -> Result<Vec<Var>> {
    let n = tape.shape(traces).0;
    let heads_feat = tape.matmul(traces, vars.w_head)?;
    let ones_row = tape.constant(Matrix::ones(1, n));
    let ones_col = tape.constant(Matrix::ones(n, 1));
    let mut out = Vec::with_capacity(vars.heads);
    for m in 0..vars.heads {
        let hm = tape.slice_cols(heads_feat, m * vars.d_head, vars.d_head)?;
        let src = tape.matmul(hm, vars.a_src[m])?;
        let dst = tape.matmul(hm, vars.a_dst[m])?;
        let src_b = tape.matmul(src, ones_row)?;
        let dst_t = tape.transpose(dst);
        let dst_b = tape.matmul(ones_col, dst_t)?;
        let raw = tape.add(src_b, dst_b)?;
        out.push(tape.leaky_relu(raw, LEAKY_SLOPE));
    }
    Ok(out)
}

pub fn attention_scores(traces: &Matrix, params: &AttentionParams) -> Result<Vec<Matrix>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false)?;
    let tr = tape.constant(traces.clone());
    let e = attention_scores_tape(&mut tape, tr, &vars)?;
    Ok(e.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// `ē = mean_m (e_m + e_mᵀ) / 2`.
pub fn symmetrize_scores_tape(tape: &mut Tape, scores: &[Var]) -> Result<Var> {
    if scores.is_empty() {
        return dim_err("no attention heads to symmetrize");
    }
    let mut acc: Option<Var> = None;
    for &e in scores {
        let et = tape.transpose(e);
        let both = tape.add(e, et)?;
        let half = tape.scale(both, 0.5);
        acc = Some(match acc {
            Some(a) => tape.add(a, half)?,
            None => half,
        });
    }
    Ok(tape.scale(acc.expect("nonempty"), 1.0 / scores.len() as f64))
}

pub fn symmetrize_scores(scores: &[Matrix]) -> Result<Matrix> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = scores.iter().map(|m| tape.constant(m.clone())).collect();
    let out = symmetrize_scores_tape(&mut tape, &vars)?;
    Ok(tape.value(out).clone())
}

/// Inverted-dropout mask: zeros with probability `p`, `1/(1-p)` otherwise.
pub fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Matrix {
    let keep = 1.0 / (1.0 - p);
    let data = (0..rows * cols).map(|_| if rng.bernoulli(p) { 0.0 } else { keep }).collect();
    Matrix::from_vec(rows, cols, data).expect("mask shape")
}

/// `Â = Drop(softmax_rows(ē / τ))`; dropout only in train mode.
pub fn instantaneous_adjacency_tape(
    tape: &mut Tape,
    ebar: Var,
    tau: f64,
    dropout_p: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    let probs = tape.softmax_rows(ebar, tau)?;
    if mode == Mode::Train && dropout_p > 0.0 {
        let (r, c) = tape.shape(probs);
        let mask = tape.constant(dropout_mask(r, c, dropout_p, rng));
        return tape.mul(probs, mask);
    }
    Ok(probs)
}

pub fn instantaneous_adjacency(ebar: &Matrix, params: &AttentionParams, mode: Mode, rng: &mut Rng) -> Result<Matrix> {
    let mut tape = Tape::new();
    let e = tape.constant(ebar.clone());
    let a = instantaneous_adjacency_tape(&mut tape, e, params.tau_softmax, params.dropout_p, mode, rng)?;
    Ok(tape.value(a).clone())
}

/// `S = β·S_prev + (1−β)·Â`; a missing `S_prev` is the all-ones prior.
pub fn momentum_update_tape(tape: &mut Tape, prev: Option<Var>, a_hat: Var, beta: f64) -> Result<Var> {
    let prev = match prev {
        Some(p) => p,
        None => {
            let (r, c) = tape.shape(a_hat);
            tape.constant(Matrix::ones(r, c))
        }
    };
    let kept = tape.scale(prev, beta);
    let fresh = tape.scale(a_hat, 1.0 - beta);
    tape.add(kept, fresh)
}

pub fn momentum_update(state: &mut AdjacencyState, a_hat: &Matrix) -> Result<()> {
    if a_hat.shape() != state.s.shape() {
        return dim_err(format!("Â is {:?}, S is {:?}", a_hat.shape(), state.s.shape()));
    }
    let mut tape = Tape::new();
    let prev = tape.constant(state.s.clone());
    let a = tape.constant(a_hat.clone());
    let s = momentum_update_tape(&mut tape, Some(prev), a, state.beta)?;
    state.s = tape.value(s).clone();
    Ok(())
}

/// 0/1 mask of the `k` largest entries per row; ties go to the lower column.
pub fn topk_mask(s: &Matrix, k: usize) -> Result<Matrix> {
    check_k(k, s.cols())?;
    let mut mask = Matrix::zeros(s.rows(), s.cols());
    let mut idx: Vec<usize> = Vec::with_capacity(s.cols());
    for r in 0..s.rows() {
        let row = s.row(r);
        idx.clear();
        idx.extend(0..s.cols());
        // Stable sort keeps lower indices first among equal values.
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        for &c in &idx[..k] {
            mask.set(r, c, 1.0);
        }
    }
    Ok(mask)
}

/// `Ŝ = S ⊙ mask`; the mask is a constant so pruned entries pass no gradient.
pub fn topk_prune_tape(tape: &mut Tape, s: Var, k: usize) -> Result<(Var, Matrix)> {
    let mask = topk_mask(tape.value(s), k)?;
    let m = tape.constant(mask.clone());
    Ok((tape.mul(s, m)?, mask))
}

pub fn topk_prune(s: &Matrix, k: usize) -> Result<(Matrix, Matrix)> {
    let mask = topk_mask(s, k)?;
    Ok((s.hadamard(&mask)?, mask))
}

// ---- full step ---------------------------------------------------------

/// Per-sample STSP state on a tape.
#[derive(Clone, Debug, Default)]
pub struct StspTapeState {
    /// Dense `S⁽ᵗ⁻¹⁾`; `None` means the all-ones prior.
    pub s: Option<Var>,
    /// Traces `N x d_proj`; `None` means zero.
    pub traces: Option<Var>,
}

/// Result of one STSP step for one sample.
#[derive(Clone, Debug)]
pub struct StspOutput {
    pub s: Var,
    pub s_pruned: Var,
    pub mask: Matrix,
}

/// One STSP step for one sample given its per-node projected features
/// `h` (`N x d_proj`, row 0 from the current source output).
#[allow(clippy::too_many_arguments)]
pub fn stsp_from_features(
    tape: &mut Tape,
    state: &mut StspTapeState,
    h: Var,
    vars: &AttentionVars,
    params: &AttentionParams,
    cfg: &StspConfig,
    mode: Mode,
    rng: &mut Rng,
) -> Result<StspOutput> {
    let traces = update_trace_tape(tape, state.traces, h, cfg.lambda)?;
    let e = attention_scores_tape(tape, traces, vars)?;
    let ebar = symmetrize_scores_tape(tape, &e)?;
    let a_hat = instantaneous_adjacency_tape(tape, ebar, params.tau_softmax, params.dropout_p, mode, rng)?;
    let s = momentum_update_tape(tape, state.s, a_hat, cfg.beta)?;
    let (s_pruned, mask) = topk_prune_tape(tape, s, cfg.k)?;
    state.traces = Some(traces);
    state.s = Some(s);
    Ok(StspOutput { s, s_pruned, mask })
}

/// Full STSP step for a batch.
///
/// `source_out` is `batch x (C*hw)`; `prev_outs` holds the previous-step
/// outputs of nodes `1..N` (absent at the first step). One state per sample.
#[allow(clippy::too_many_arguments)]
pub fn stsp_step(
    tape: &mut Tape,
    states: &mut [StspTapeState],
    vars: &AttentionVars,
    params: &AttentionParams,
    cfg: &StspConfig,
    source_out: Var,
    prev_outs: Option<&[Var]>,
    channels: usize,
    hw: usize,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Vec<StspOutput>> {
    let batch = tape.shape(source_out).0;
    if states.len() != batch {
        return dim_err(format!("{} STSP states for a batch of {batch}", states.len()));
    }
    // Hybrid state, projected node by node over the whole batch.
    let mut feats = Vec::with_capacity(cfg.nodes);
    feats.push(project_features_tape(tape, source_out, channels, hw, vars)?);
    match prev_outs {
        Some(prev) => {
            if prev.len() != cfg.nodes - 1 {
                return dim_err(format!("{} previous outputs for {} non-source nodes", prev.len(), cfg.nodes - 1));
            }
            for &p in prev {
                feats.push(project_features_tape(tape, p, channels, hw, vars)?);
            }
        }
        None => {
            let zero = tape.constant(Matrix::zeros(batch, channels * hw));
            let hz = project_features_tape(tape, zero, channels, hw, vars)?;
            feats.extend(std::iter::repeat_n(hz, cfg.nodes - 1));
        }
    }
    let stacked = tape.concat_rows(&feats)?;
    let mut outs = Vec::with_capacity(batch);
    for (b, state) in states.iter_mut().enumerate() {
        let rows: Vec<usize> = (0..cfg.nodes).map(|i| i * batch + b).collect();
        let h = tape.gather_rows(stacked, &rows)?;
        outs.push(stsp_from_features(tape, state, h, vars, params, cfg, mode, rng)?);
    }
    Ok(outs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(channels: usize, heads: usize, seed: u64) -> AttentionParams {
        AttentionParams::new(channels, heads, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn hybrid_state_first_step_zero() {
        let src = Matrix::ones(1, 6);
        let hs = hybrid_state(&src, None, 4).unwrap();
        assert_eq!(hs[0], src);
        for h in &hs[1..] {
            assert_eq!(h, &Matrix::zeros(1, 6));
        }
        let prev = vec![Matrix::filled(1, 6, 0.5), Matrix::filled(1, 6, 0.25), Matrix::zeros(1, 6)];
        let hs = hybrid_state(&src, Some(&prev), 4).unwrap();
        assert_eq!(&hs[1..], &prev[..]);
    }

    #[test]
    fn projection_cases() {
        let mut p = params(1, 1, 1);
        p.w_proj = Matrix::identity(1);
        assert_eq!(project_features(&[0.0; 4], 1, 4, &p).unwrap(), vec![0.0]);
        assert_eq!(project_features(&[1.0; 4], 1, 4, &p).unwrap(), vec![1.0]);
        p.w_proj = Matrix::scalar(2.0);
        assert_eq!(project_features(&[1.0, 0.0, 1.0, 0.0], 1, 4, &p).unwrap(), vec![1.0]);
        let rand_p = params(4, 2, 9);
        assert_eq!(project_features(&[0.0; 16], 4, 4, &rand_p).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn trace_edge_cases() {
        let mut bank = TraceBank::new(2, 3, 1.0);
        bank.traces.row_mut(0).copy_from_slice(&[0.3, 0.2, 0.1]);
        assert_eq!(update_trace(&mut bank, &[1.0, 1.0, 1.0], 0).unwrap(), vec![0.3, 0.2, 0.1]);
        bank.lambda = 0.0;
        assert_eq!(update_trace(&mut bank, &[0.7, 0.8, 0.9], 0).unwrap(), vec![0.7, 0.8, 0.9]);
        bank.lambda = 0.6;
        let r = update_trace(&mut bank, &[1.0, 1.0, 1.0], 1).unwrap();
        for v in r {
            assert!((v - 0.4).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_scores() {
        let mut p = params(1, 1, 2);
        p.w_head = Matrix::identity(1);
        p.a = Matrix::from_rows(&[&[1.0, 1.0]]);
        let tr = Matrix::from_rows(&[&[2.0], &[3.0]]);
        let e = attention_scores(&tr, &p).unwrap();
        assert_eq!(e[0], Matrix::from_rows(&[&[4.0, 5.0], &[5.0, 6.0]]));
        p.a = Matrix::zeros(1, 2);
        assert_eq!(attention_scores(&tr, &p).unwrap()[0], Matrix::zeros(2, 2));
    }

    #[test]
    fn identical_traces_constant_scores() {
        let p = params(4, 2, 3);
        let row: &[f64] = &[0.1, 0.5, 0.2, 0.9];
        let tr = Matrix::from_rows(&[row; 3]);
        for e in attention_scores(&tr, &p).unwrap() {
            let v = e.get(0, 0);
            assert!(e.data().iter().all(|&x| x == v));
        }
    }

    #[test]
    fn symmetrize_hand_case() {
        let e = Matrix::from_rows(&[&[0.0, 1.0], &[3.0, 0.0]]);
        let s = symmetrize_scores(&[e]).unwrap();
        assert_eq!(s, Matrix::from_rows(&[&[0.0, 2.0], &[2.0, 0.0]]));
        let sym = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 5.0]]);
        assert_eq!(symmetrize_scores(&[sym.clone(), sym.clone()]).unwrap(), sym);
    }

    #[test]
    fn eval_adjacency_uniform_and_sharp() {
        let p = params(4, 2, 1);
        let mut rng = Rng::new(0);
        let a = instantaneous_adjacency(&Matrix::zeros(3, 3), &p, Mode::Eval, &mut rng).unwrap();
        assert!(a.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let e = Matrix::from_rows(&[&[0.1, 0.0, 0.0], &[0.0, 0.1, 0.0], &[0.0, 0.0, 0.1]]);
        let a = instantaneous_adjacency(&e, &p, Mode::Eval, &mut rng).unwrap();
        assert!((a.get(0, 0) - 0.99991).abs() < 1e-5);
        assert!((a.get(0, 1) - 4.5e-5).abs() < 1e-6);
    }

    #[test]
    fn dropout_rate() {
        let mut rng = Rng::new(2020);
        let m = dropout_mask(1000, 100, 0.2, &mut rng);
        let zeros = m.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((zeros - 0.2).abs() < 0.01, "{zeros}");
        assert!(m.data().iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-15));
    }

    #[test]
    fn momentum_cases() {
        let mut st = AdjacencyState::new(2, 1.0, 2).unwrap();
        momentum_update(&mut st, &Matrix::zeros(2, 2)).unwrap();
        assert_eq!(st.s, Matrix::ones(2, 2));
        st.beta = 0.0;
        let a = Matrix::from_rows(&[&[0.3, 0.7], &[0.6, 0.4]]);
        momentum_update(&mut st, &a).unwrap();
        assert_eq!(st.s, a);
        let mut st = AdjacencyState::new(2, 0.2, 2).unwrap();
        momentum_update(&mut st, &Matrix::zeros(2, 2)).unwrap();
        assert!(st.s.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn topk_cases() {
        let s = Matrix::from_rows(&[&[0.5, 0.3, 0.2, 0.1]]);
        assert_eq!(topk_prune(&s, 2).unwrap().0, Matrix::from_rows(&[&[0.5, 0.3, 0.0, 0.0]]));
        assert_eq!(topk_prune(&s, 4).unwrap().0, s);
        let tie = Matrix::from_rows(&[&[0.3, 0.3, 0.3]]);
        assert_eq!(topk_prune(&tie, 1).unwrap().0, Matrix::from_rows(&[&[0.3, 0.0, 0.0]]));
        assert!(topk_prune(&s, 0).is_err());
        assert!(topk_prune(&s, 5).is_err());
    }

    #[test]
    fn invalid_attention_config() {
        assert!(AttentionParams::new(6, 4, &mut Rng::new(1)).is_err());
        let mut p = params(4, 2, 1);
        p.dropout_p = 1.0;
        assert!(p.validate().is_err());
        p.dropout_p = 0.2;
        p.tau_softmax = 0.0;
        assert!(p.validate().is_err());
    }
}
