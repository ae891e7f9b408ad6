//! Dynamic-graph diffusion layers and the stacked classifier network.
//!
//! One layer step at timestep `t`:
//! 1. source node: `O_0 = AvgPool(ConvBNSN_0(input))`
//! 2. adjacency: `Ŝ = STSP(S_prev, {O_0, O_1^(t-1), ..})`
//! 3. diffusion: `I_i = [P^M X]_i` with `X = [O_0; 0]`
//! 4. nodes: `O_i = ConvBNSN_i(I_i)`, output `AvgPool(Σ σ(w_i) O_i)`
//!
//! Parameters live in [`MorphNet`]; per-sample dynamic state (membranes,
//! adjacency, traces) lives in [`NetRunState`], so a frozen network can be
//! evaluated on independent states.

use serde::{Deserialize, Serialize};

use crate::diffusion::{build_operator_tape, diffuse_tape, dirichlet_energy};
use crate::error::{dim_err, param_err, Result};
use crate::neuron::{conv_bn_sn_forward, source_forward, ConvBnSnNode, LifParams, LifTapeState, NodeVars, SpikeTensor};
use crate::numgrad::{BnBatchStats, Matrix, Rng, SpikeFn, Tape, Var};
use crate::stsp::{stsp_step, AttentionParams, AttentionVars, StspConfig, StspTapeState};
use crate::Mode;

/// Architecture and structural hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub in_channels: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub layers: usize,
    pub nodes: usize,
    pub diffusion_steps: usize,
    pub k: usize,
    pub beta: f64,
    pub lambda: f64,
    pub heads: usize,
    pub tau_softmax: f64,
    pub dropout_p: f64,
    pub classes: usize,
    pub timesteps: usize,
    pub tau_decay: f64,
    pub v_th: f64,
}

impl Default for NetConfig {
    /// Desk-scale configuration: 3 stages of 4 nodes, 16 channels, 16x16
    /// input with 2 polarity channels, 5 timesteps.
    fn default() -> Self {
        Self {
            in_channels: 2,
            channels: 16,
            height: 16,
            width: 16,
            layers: 3,
            nodes: 4,
            diffusion_steps: 2,
            k: 3,
            beta: 0.2,
            lambda: 0.6,
            heads: crate::stsp::DEFAULT_HEADS,
            tau_softmax: crate::stsp::DEFAULT_TAU_SOFTMAX,
            dropout_p: crate::stsp::DEFAULT_DROPOUT,
            classes: 4,
            timesteps: 5,
            tau_decay: crate::neuron::DEFAULT_TAU_DECAY,
            v_th: crate::neuron::DEFAULT_V_TH,
        }
    }
}

/// Spatial sizes seen by one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerGeometry {
    /// Source-node input.
    pub input: (usize, usize),
    /// Pooled source output and non-source node maps.
    pub nodes: (usize, usize),
    /// Layer output after the readout pooling.
    pub output: (usize, usize),
}

fn pooled(h: usize, w: usize) -> Result<(usize, usize)> {
    if h == 1 && w == 1 {
        return Ok((1, 1));
    }
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
        return dim_err(format!("2x2 pooling needs even spatial dims, got {h}x{w}"));
    }
    Ok((h / 2, w / 2))
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels == 0 || self.classes == 0 || self.timesteps == 0 {
            return param_err("channel, class and timestep counts must be positive");
        }
        if self.layers == 0 {
            return param_err("network needs at least one layer");
        }
        self.stsp().validate()?;
        if !self.channels.is_multiple_of(self.heads.max(1)) || self.heads == 0 {
            return param_err(format!("{} channels not divisible by {} heads", self.channels, self.heads));
        }
        if !(self.tau_softmax > 0.0) {
            return param_err(format!("softmax temperature must be positive, got {}", self.tau_softmax));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return param_err(format!("dropout must lie in [0, 1), got {}", self.dropout_p));
        }
        if !(0.0..=1.0).contains(&self.tau_decay) || !(self.v_th > 0.0) {
            return param_err("tau_decay must lie in [0, 1] and v_th must be positive");
        }
        self.geometry().map(|_| ())
    }

    pub fn stsp(&self) -> StspConfig {
        StspConfig { nodes: self.nodes, k: self.k, beta: self.beta, lambda: self.lambda }
    }

    pub fn geometry(&self) -> Result<Vec<LayerGeometry>> {
        let mut hw = (self.height, self.width);
        let mut out = Vec::with_capacity(self.layers);
        for _ in 0..self.layers {
            let nodes = pooled(hw.0, hw.1)?;
            let output = pooled(nodes.0, nodes.1)?;
            out.push(LayerGeometry { input: hw, nodes, output });
            hw = output;
        }
        Ok(out)
    }

    /// Length of the classifier input (last layer output, flattened).
    pub fn feature_len(&self) -> Result<usize> {
        let g = self.geometry()?;
        let (h, w) = g.last().expect("at least one layer").output;
        Ok(self.channels * h * w)
    }
}

/// One dynamic-graph layer; node 0 is the source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgdLayer {
    pub nodes: Vec<ConvBnSnNode>,
    pub attention: AttentionParams,
    pub stsp: StspConfig,
    pub diffusion_steps: usize,
    /// Readout logits `w_i`, `1 x N`.
    pub readout: Matrix,
    pub channels: usize,
    #[serde(skip)]
    pub geometry: Option<LayerGeometry>,
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub nodes: Vec<NodeVars>,
    pub attention: AttentionVars,
    pub readout: Var,
}

impl DgdLayer {
    pub fn new(in_channels: usize, cfg: &NetConfig, geometry: LayerGeometry, rng: &mut Rng) -> Result<Self> {
        let mut nodes = Vec::with_capacity(cfg.nodes);
        nodes.push(ConvBnSnNode::new(in_channels, cfg.channels, rng));
        for _ in 1..cfg.nodes {
            nodes.push(ConvBnSnNode::new(cfg.channels, cfg.channels, rng));
        }
        let mut attention = AttentionParams::new(cfg.channels, cfg.heads, rng)?;
        attention.tau_softmax = cfg.tau_softmax;
        attention.dropout_p = cfg.dropout_p;
        Ok(Self {
            nodes,
            attention,
            stsp: cfg.stsp(),
            diffusion_steps: cfg.diffusion_steps,
            readout: Matrix::zeros(1, cfg.nodes),
            channels: cfg.channels,
            geometry: Some(geometry),
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<LayerVars> {
        let nodes = self.nodes.iter().map(|n| n.bind(tape, trainable)).collect();
        let attention = self.attention.bind(tape, trainable)?;
        let readout = if trainable { tape.leaf(self.readout.clone()) } else { tape.constant(self.readout.clone()) };
        Ok(LayerVars { nodes, attention, readout })
    }

    fn params(&self) -> Vec<&Matrix> {
        let mut v: Vec<&Matrix> = self.nodes.iter().flat_map(|n| n.params()).collect();
        v.extend(self.attention.params());
        v.push(&self.readout);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v: Vec<&mut Matrix> = self.nodes.iter_mut().flat_map(|n| n.params_mut()).collect();
        v.extend(self.attention.params_mut());
        v.push(&mut self.readout);
        v
    }

    fn geometry(&self) -> Result<LayerGeometry> {
        self.geometry.ok_or_else(|| crate::Error::Contract("layer geometry not initialized".into()))
    }
}

impl LayerVars {
    fn all(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.nodes.iter().flat_map(|n| n.as_vec()).collect();
        v.extend(self.attention.as_vec());
        v.push(self.readout);
        v
    }
}

/// Per-timestep record of one layer for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Dense post-momentum adjacency `S⁽ᵗ⁾`.
    pub s: Matrix,
    /// Pruned adjacency `Ŝ⁽ᵗ⁾`.
    pub s_pruned: Matrix,
    /// Mean spike rate per node (source measured before pooling).
    pub firing_rates: Vec<f64>,
    /// Dirichlet energy of the diffused graph signal.
    pub dirichlet_energy: f64,
    /// Binary spike maps per node when recording is enabled; node 0 at the
    /// source input resolution, others at node resolution.
    pub spikes: Option<Vec<Vec<u8>>>,
}

/// All timestep records of one layer for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub records: Vec<StepRecord>,
    pub channels: usize,
    pub geometry: LayerGeometry,
}

/// Per-sample dynamic state of one layer.
#[derive(Clone, Debug, Default)]
pub struct LayerRunState {
    pub source: LifTapeState,
    pub nodes: Vec<LifTapeState>,
    pub stsp: Vec<StspTapeState>,
    pub prev_outs: Option<Vec<Var>>,
}

/// Dynamic state of a whole network for one batch. A fresh value is the
/// reset state: zero membranes and spikes, all-ones `S`, zero traces.
#[derive(Clone, Debug, Default)]
pub struct NetRunState {
    pub encoder: LifTapeState,
    pub layers: Vec<LayerRunState>,
}

/// Forward options.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ForwardOptions {
    /// Keep binary spike maps in the trace records.
    pub record_spikes: bool,
}

/// Batch norm observation tagged with the node's position:
/// `0` is the encoder, `1 + l*N + i` is node `i` of layer `l`.
pub type BnObservation = (usize, BnBatchStats);

/// Output of one layer step for a batch.
pub struct LayerStep {
    pub output: Var,
    pub records: Vec<StepRecord>,
    pub bn: Vec<(usize, BnBatchStats)>,
}

/// One timestep of a layer on a batch (`input` is `batch x (C_in*h*w)`).
#[allow(clippy::too_many_arguments)]
pub fn layer_forward(
    tape: &mut Tape,
    layer: &DgdLayer,
    vars: &LayerVars,
    input: Var,
    state: &mut LayerRunState,
    mode: Mode,
    lif: &LifParams,
    rng: &mut Rng,
    opts: ForwardOptions,
) -> Result<LayerStep> {
    let geom = layer.geometry()?;
    let n = layer.stsp.nodes;
    let c = layer.channels;
    let (ih, iw) = geom.input;
    let (nh, nw) = geom.nodes;
    let feat = c * nh * nw;
    let batch = tape.shape(input).0;
    if state.stsp.len() != batch {
        state.stsp = vec![StspTapeState::default(); batch];
    }
    if state.nodes.len() != n - 1 {
        state.nodes = vec![LifTapeState::default(); n - 1];
    }
    let mut bn = Vec::new();

    // Phase 1: source node.
    let (o0, src_out) = source_forward(tape, &layer.nodes[0], &vars.nodes[0], input, ih, iw, mode, lif, &mut state.source)
        .map_err(|e| phase_err("source", e))?;
    if let Some(s) = src_out.bn_stats {
        bn.push((0, s));
    }

    // Phase 2: adjacency.
    let stsp_out = stsp_step(
        tape,
        &mut state.stsp,
        &vars.attention,
        &layer.attention,
        &layer.stsp,
        o0,
        state.prev_outs.as_deref(),
        c,
        nh * nw,
        mode,
        rng,
    )
    .map_err(|e| phase_err("stsp", e))?;

    // Phase 3: diffusion from the source row.
    let zeros = tape.constant(Matrix::zeros(n - 1, feat));
    let mut diffused = Vec::with_capacity(batch);
    let mut operators = Vec::with_capacity(batch);
    for (b, so) in stsp_out.iter().enumerate() {
        let row0 = tape.gather_rows(o0, &[b])?;
        let x = tape.concat_rows(&[row0, zeros])?;
        let (p, s_sym) = build_operator_tape(tape, so.s_pruned).map_err(|e| phase_err("diffusion", e))?;
        let y = diffuse_tape(tape, p, x, layer.diffusion_steps)?;
        diffused.push(y);
        operators.push(s_sym);
    }
    let stacked = tape.concat_rows(&diffused)?;

    // Phase 4: non-source nodes and readout.
    let mut outs = Vec::with_capacity(n);
    outs.push(o0);
    for i in 1..n {
        let rows: Vec<usize> = (0..batch).map(|b| b * n + i).collect();
        let inp = tape.gather_rows(stacked, &rows)?;
        let out = conv_bn_sn_forward(tape, &layer.nodes[i], &vars.nodes[i], inp, nh, nw, mode, lif, &mut state.nodes[i - 1])
            .map_err(|e| phase_err("node", e))?;
        if let Some(s) = out.bn_stats {
            bn.push((i, s));
        }
        outs.push(out.spikes);
    }
    let gates = tape.sigmoid(vars.readout);
    let mut total: Option<Var> = None;
    for (i, &o) in outs.iter().enumerate() {
        let g = tape.slice_cols(gates, i, 1)?;
        let weighted = tape.mul_scalar_var(o, g)?;
        total = Some(match total {
            Some(t) => tape.add(t, weighted)?,
            None => weighted,
        });
    }
    let output = tape.avg_pool2(total.expect("N >= 2"), c, nh, nw).map_err(|e| phase_err("readout", e))?;

    // Detached per-sample records.
    let mut records = Vec::with_capacity(batch);
    for b in 0..batch {
        let y = tape.value(diffused[b]);
        let s_sym = tape.value(operators[b]);
        let energy = dirichlet_energy(y, s_sym)?;
        let mut rates = Vec::with_capacity(n);
        rates.push(mean(tape.value(src_out.spikes).row(b)));
        for &o in &outs[1..] {
            rates.push(mean(tape.value(o).row(b)));
        }
        let spikes = opts.record_spikes.then(|| {
            let mut maps = vec![binarize(tape.value(src_out.spikes).row(b))];
            maps.extend(outs[1..].iter().map(|&o| binarize(tape.value(o).row(b))));
            maps
        });
        records.push(StepRecord {
            s: tape.value(stsp_out[b].s).clone(),
            s_pruned: tape.value(stsp_out[b].s_pruned).clone(),
            firing_rates: rates,
            dirichlet_energy: energy,
            spikes,
        });
    }
    state.prev_outs = Some(outs[1..].to_vec());
    Ok(LayerStep { output, records, bn })
}

fn phase_err(phase: &str, e: crate::Error) -> crate::Error {
    match e {
        crate::Error::Dimension(m) => crate::Error::Dimension(format!("{phase} phase: {m}")),
        other => other,
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn binarize(v: &[f64]) -> Vec<u8> {
    v.iter().map(|&x| (x >= 0.5) as u8).collect()
}

/// The full classifier: direct encoder, stacked layers, linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorphNet {
    pub config: NetConfig,
    pub lif: LifParams,
    pub encoder: ConvBnSnNode,
    pub layers: Vec<DgdLayer>,
    /// `feature_len x classes`.
    pub classifier_w: Matrix,
    pub classifier_b: Matrix,
}

/// Parameter handles of a network bound to a tape.
#[derive(Clone, Debug)]
pub struct NetVars {
    pub encoder: NodeVars,
    pub layers: Vec<LayerVars>,
    pub classifier_w: Var,
    pub classifier_b: Var,
}

impl NetVars {
    /// Handles in the same order as [`MorphNet::params`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.encoder.as_vec();
        for l in &self.layers {
            v.extend(l.all());
        }
        v.push(self.classifier_w);
        v.push(self.classifier_b);
        v
    }
}

/// Result of a batched network pass.
pub struct ForwardOutput {
    /// Mean-over-time logits, `batch x classes`.
    pub logits: Var,
    /// `traces[b][l]`: layer `l` of sample `b`.
    pub traces: Vec<Vec<LayerTrace>>,
    /// Time-averaged classifier input per sample.
    pub features: Vec<Vec<f64>>,
    pub bn: Vec<BnObservation>,
}

impl MorphNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let encoder = ConvBnSnNode::new(config.in_channels, config.channels, &mut rng);
        let geometry = config.geometry()?;
        let layers = geometry
            .iter()
            .map(|&g| DgdLayer::new(config.channels, &config, g, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let f = config.feature_len()?;
        let bound = 1.0 / (f as f64).sqrt();
        let w = (0..f * config.classes).map(|_| rng.uniform_range(-bound, bound)).collect();
        let lif = LifParams { tau_decay: config.tau_decay, v_th: config.v_th, ..LifParams::default() };
        Ok(Self {
            classifier_w: Matrix::from_vec(f, config.classes, w)?,
            classifier_b: Matrix::zeros(1, config.classes),
            config,
            lif,
            encoder,
            layers,
        })
    }

    /// Restores derived fields after deserialization.
    pub fn finalize(&mut self) -> Result<()> {
        self.config.validate()?;
        let geometry = self.config.geometry()?;
        if geometry.len() != self.layers.len() {
            return dim_err(format!("{} layers stored, config declares {}", self.layers.len(), geometry.len()));
        }
        for (l, g) in self.layers.iter_mut().zip(geometry) {
            l.geometry = Some(g);
            l.attention.validate()?;
        }
        self.lif = LifParams { tau_decay: self.config.tau_decay, v_th: self.config.v_th, spike_fn: self.lif.spike_fn };
        Ok(())
    }

    /// Copy with the spike step replaced by `sigmoid(slope * x)`.
    pub fn smooth_clone(&self, slope: f64) -> Self {
        let mut c = self.clone();
        c.lif.spike_fn = SpikeFn::Sigmoid { slope };
        c
    }

    /// Sets `beta` in the config and every layer.
    pub fn set_beta(&mut self, beta: f64) {
        self.config.beta = beta;
        for l in &mut self.layers {
            l.stsp.beta = beta;
        }
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut v = self.encoder.params();
        for l in &self.layers {
            v.extend(l.params());
        }
        v.push(&self.classifier_w);
        v.push(&self.classifier_b);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.encoder.params_mut();
        for l in &mut self.layers {
            v.extend(l.params_mut());
        }
        v.push(&mut self.classifier_w);
        v.push(&mut self.classifier_b);
        v
    }

    /// Node by BN observation tag.
    pub fn node_mut(&mut self, tag: usize) -> Option<&mut ConvBnSnNode> {
        if tag == 0 {
            return Some(&mut self.encoder);
        }
        let n = self.config.nodes;
        let (l, i) = ((tag - 1) / n, (tag - 1) % n);
        self.layers.get_mut(l).and_then(|layer| layer.nodes.get_mut(i))
    }

    pub fn apply_bn(&mut self, observations: &[BnObservation]) {
        for (tag, stats) in observations {
            if let Some(node) = self.node_mut(*tag) {
                node.bn.update_running(stats);
            }
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<NetVars> {
        let reg = |m: &Matrix, tape: &mut Tape| if trainable { tape.leaf(m.clone()) } else { tape.constant(m.clone()) };
        let encoder = self.encoder.bind(tape, trainable);
        let layers = self.layers.iter().map(|l| l.bind(tape, trainable)).collect::<Result<Vec<_>>>()?;
        let classifier_w = reg(&self.classifier_w, tape);
        let classifier_b = reg(&self.classifier_b, tape);
        Ok(NetVars { encoder, layers, classifier_w, classifier_b })
    }

    /// Fresh (reset) dynamic state for a batch.
    pub fn fresh_state(&self, batch: usize) -> NetRunState {
        NetRunState {
            encoder: LifTapeState::default(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerRunState {
                    source: LifTapeState::default(),
                    nodes: vec![LifTapeState::default(); l.stsp.nodes - 1],
                    stsp: vec![StspTapeState::default(); batch],
                    prev_outs: None,
                })
                .collect(),
        }
    }

    /// Batched forward pass over `streams` starting from a reset state.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &NetVars,
        streams: &[&SpikeTensor],
        mode: Mode,
        rng: &mut Rng,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let batch = streams.len();
        if batch == 0 {
            return dim_err("empty batch");
        }
        for s in streams {
            let [t, c, h, w] = s.dims();
            if t != cfg.timesteps {
                return dim_err(format!("stream has {t} frames, network expects T={}", cfg.timesteps));
            }
            if (c, h, w) != (cfg.in_channels, cfg.height, cfg.width) {
                return dim_err(format!(
                    "stream frames are {c}x{h}x{w}, network expects {}x{}x{}",
                    cfg.in_channels, cfg.height, cfg.width
                ));
            }
        }
        let mut state = self.fresh_state(batch);
        let mut traces: Vec<Vec<LayerTrace>> = (0..batch)
            .map(|_| {
                self.layers
                    .iter()
                    .map(|l| LayerTrace {
                        records: Vec::with_capacity(cfg.timesteps),
                        channels: l.channels,
                        geometry: l.geometry.expect("initialized"),
                    })
                    .collect()
            })
            .collect();
        let mut bn = Vec::new();
        let flen = cfg.feature_len()?;
        let mut feat_sum = vec![vec![0.0; flen]; batch];
        let mut logit_sum: Option<Var> = None;
        let frame_len = streams[0].frame_len();
        for t in 0..cfg.timesteps {
            let mut data = Vec::with_capacity(batch * frame_len);
            for s in streams {
                data.extend(s.frame(t).iter().map(|&v| v as f64));
            }
            let x = tape.constant(Matrix::from_vec(batch, frame_len, data)?);
            let enc = conv_bn_sn_forward(
                tape,
                &self.encoder,
                &vars.encoder,
                x,
                cfg.height,
                cfg.width,
                mode,
                &self.lif,
                &mut state.encoder,
            )?;
            if let Some(s) = enc.bn_stats {
                bn.push((0, s));
            }
            let mut h = enc.spikes;
            for (l, layer) in self.layers.iter().enumerate() {
                let step = layer_forward(tape, layer, &vars.layers[l], h, &mut state.layers[l], mode, &self.lif, rng, opts)?;
                for (i, s) in step.bn {
                    bn.push((1 + l * cfg.nodes + i, s));
                }
                for (b, rec) in step.records.into_iter().enumerate() {
                    traces[b][l].records.push(rec);
                }
                h = step.output;
            }
            for (b, acc) in feat_sum.iter_mut().enumerate() {
                for (a, v) in acc.iter_mut().zip(tape.value(h).row(b)) {
                    *a += v;
                }
            }
            let z = tape.matmul(h, vars.classifier_w)?;
            let logits_t = tape.add_row_broadcast(z, vars.classifier_b)?;
            logit_sum = Some(match logit_sum {
                Some(s) => tape.add(s, logits_t)?,
                None => logits_t,
            });
        }
        let logits = tape.scale(logit_sum.expect("T >= 1"), 1.0 / cfg.timesteps as f64);
        let tn = cfg.timesteps as f64;
        let features = feat_sum.into_iter().map(|v| v.into_iter().map(|x| x / tn).collect()).collect();
        Ok(ForwardOutput { logits, traces, features, bn })
    }

    /// Eval-mode inference of a batch on a private tape.
    pub fn infer(&self, streams: &[&SpikeTensor], opts: ForwardOptions) -> Result<Inference> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let mut rng = Rng::new(0);
        let out = self.forward(&mut tape, &vars, streams, Mode::Eval, &mut rng, opts)?;
        let lg = tape.value(out.logits);
        let logits = (0..lg.rows()).map(|r| lg.row(r).to_vec()).collect();
        Ok(Inference { logits, traces: out.traces, features: out.features })
    }
}

/// Detached eval-mode outputs per sample.
#[derive(Clone, Debug)]
pub struct Inference {
    pub logits: Vec<Vec<f64>>,
    pub traces: Vec<Vec<LayerTrace>>,
    pub features: Vec<Vec<f64>>,
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
