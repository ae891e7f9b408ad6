//! Experiment commands. Each returns its results so callers decide what to
//! print; every artifact is a pure function of the inputs and seed.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use morphsnn_core::diffusion::{build_operator, dirichlet_energy, verify_gradient_flow};
use morphsnn_core::energy::{
    count_gd_ops, count_spike_acs, count_stsp_ops, dense_spike_acs, firing_rate_report, Component, EnergyConstants, OpCountReport,
};
use morphsnn_core::network::{ForwardOptions, Inference, LayerTrace, MorphNet};
use morphsnn_core::neuron::SpikeTensor;
use morphsnn_core::ood::{
    compute_prototypes, default_knn_k, dgp_score, energy_score, knn_score, metrics, msp_score, nearest_rank, scp_score,
    topology_signature, Method, OodMetrics, OodScoreSet,
};
use morphsnn_core::training::{
    evaluate, generate_dataset, train as run_training, DatasetKind, EpochMetrics, PerturbKind, PerturbSpec, SynthStream, TrainConfig,
};
use morphsnn_core::{Matrix, Rng};
use serde::Serialize;

use crate::config::load_config;
use crate::format::{Checkpoint, EventFrameFile};

const INFER_BATCH: usize = 32;
/// Nearest-rank percentile of training scores used as the flagging threshold.
pub const FLAG_PERCENTILE: f64 = 0.95;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ENERGY_TREND_FILE: &str = "energy_trend.csv";

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

#[derive(Clone, Debug)]
pub struct GenerateArgs {
    pub kind: DatasetKind,
    pub classes: usize,
    pub per_class: usize,
    pub dims: [usize; 4],
    pub seed: u64,
    pub out: PathBuf,
}

pub fn generate(args: &GenerateArgs) -> Result<EventFrameFile> {
    let data = generate_dataset(args.kind, args.classes, args.per_class, args.dims, args.seed)?;
    let file = EventFrameFile::new(data, args.classes)?;
    file.write(&args.out)?;
    Ok(file)
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub test: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct MetricsRow {
    epoch: usize,
    loss: f64,
    train_acc: f64,
    test_acc: Option<f64>,
    mean_dirichlet_energy: f64,
    mean_firing_rate: f64,
}

#[derive(Serialize)]
struct EnergyTrendRow {
    epoch: usize,
    mean_dirichlet_energy: f64,
    relative_to_first: f64,
}

fn check_data(net: &MorphNet, file: &EventFrameFile, path: &Path) -> Result<()> {
    let c = &net.config;
    let want = [c.timesteps, c.in_channels, c.height, c.width];
    ensure!(
        file.dims == want,
        "{} holds {:?} streams (T, C, H, W) but the network expects {want:?}",
        path.display(),
        file.dims
    );
    ensure!(
        file.classes == c.classes,
        "{} declares {} classes but the network has {}",
        path.display(),
        file.classes,
        c.classes
    );
    Ok(())
}

pub fn train(args: &TrainArgs, on_epoch: impl FnMut(&EpochMetrics)) -> Result<(Checkpoint, Vec<EpochMetrics>)> {
    let mut cfg = match &args.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let data = EventFrameFile::read(&args.data)?;
    let test = args.test.as_deref().map(EventFrameFile::read).transpose()?;
    let mut net = MorphNet::new(cfg.net_config(), cfg.seed)?;
    check_data(&net, &data, &args.data)?;
    if let (Some(t), Some(p)) = (&test, &args.test) {
        check_data(&net, t, p)?;
    }
    let history = run_training(&mut net, &data.samples, test.as_ref().map(|t| t.samples.as_slice()), &cfg, on_epoch)?;

    fs::create_dir_all(&args.out_dir).with_context(|| format!("cannot create {}", args.out_dir.display()))?;
    let ck = Checkpoint::new(cfg, net);
    ck.save(&args.out_dir.join(CHECKPOINT_FILE))?;
    let mut w = csv_writer(&args.out_dir.join(METRICS_FILE))?;
    for m in &history {
        w.serialize(MetricsRow {
            epoch: m.epoch,
            loss: m.loss,
            train_acc: m.train_acc,
            test_acc: m.test_acc,
            mean_dirichlet_energy: m.mean_dirichlet_energy,
            mean_firing_rate: m.mean_firing_rate,
        })?;
    }
    w.flush()?;
    let first = history.first().map(|m| m.mean_dirichlet_energy).unwrap_or(0.0);
    let mut w = csv_writer(&args.out_dir.join(ENERGY_TREND_FILE))?;
    for m in &history {
        let rel = if first > 0.0 { m.mean_dirichlet_energy / first } else { 0.0 };
        w.serialize(EnergyTrendRow { epoch: m.epoch, mean_dirichlet_energy: m.mean_dirichlet_energy, relative_to_first: rel })?;
    }
    w.flush()?;
    Ok((ck, history))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphKind {
    /// Symmetric random weights on a connected support.
    Random,
    Path,
    /// All-ones off the diagonal.
    Complete,
}

impl std::str::FromStr for GraphKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "path" => Ok(Self::Path),
            "complete" => Ok(Self::Complete),
            _ => bail!("unknown graph '{s}' (expected random, path or complete)"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignalKind {
    /// Uniform in [-1, 1] per entry.
    Random,
    /// `(-1)^i` on node `i`.
    Alternating,
}

impl std::str::FromStr for SignalKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "alternating" => Ok(Self::Alternating),
            _ => bail!("unknown signal '{s}' (expected random or alternating)"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiffusionArgs {
    pub nodes: usize,
    pub steps: usize,
    pub graph: GraphKind,
    pub signal: SignalKind,
    pub features: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiffusionRow {
    pub step: usize,
    pub dirichlet_energy: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionAnalysis {
    pub rows: Vec<DiffusionRow>,
    pub csv: String,
    pub spectrum_ok: bool,
    pub monotone_ok: bool,
    pub flow_residual: f64,
}

impl DiffusionAnalysis {
    pub fn passed(&self) -> bool {
        self.spectrum_ok && self.monotone_ok && self.flow_residual < 1e-12
    }

    pub fn verdict(&self) -> String {
        let mark = |ok: bool| if ok { "ok" } else { "VIOLATED" };
        format!(
            "verdict: {} (spectrum within [0, 2]: {}; energy non-increasing: {}; gradient-flow residual {:.3e}: {})",
            if self.passed() { "PASS" } else { "FAIL" },
            mark(self.spectrum_ok),
            mark(self.monotone_ok),
            self.flow_residual,
            mark(self.flow_residual < 1e-12)
        )
    }
}

pub fn example_graph(kind: GraphKind, n: usize, rng: &mut Rng) -> Matrix {
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let w = match kind {
                GraphKind::Complete => 1.0,
                GraphKind::Path => (j == i + 1) as u8 as f64,
                GraphKind::Random => {
                    if j == i + 1 || rng.bernoulli(0.5) {
                        rng.uniform_range(0.05, 1.0)
                    } else {
                        0.0
                    }
                }
            };
            s.set(i, j, w);
            s.set(j, i, w);
        }
    }
    s
}

pub fn diffusion_analyze(args: &DiffusionArgs) -> Result<DiffusionAnalysis> {
    ensure!(args.nodes >= 1, "need at least one node");
    ensure!(args.features >= 1, "need at least one feature column");
    let mut rng = Rng::new(args.seed);
    let s = example_graph(args.graph, args.nodes, &mut rng);
    let op = build_operator(&s, args.steps)?;
    let mut y = Matrix::zeros(args.nodes, args.features);
    for i in 0..args.nodes {
        for f in 0..args.features {
            let v = match args.signal {
                SignalKind::Random => rng.uniform_range(-1.0, 1.0),
                SignalKind::Alternating => {
                    if i % 2 == 0 {
                        1.0
                    } else {
                        -1.0
                    }
                }
            };
            y.set(i, f, v);
        }
    }
    let (_, (lmin, lmax)) = op.spectral_bounds()?;
    let flow_residual = verify_gradient_flow(&op, &y)?;
    let steps = if args.nodes == 1 { 0 } else { args.steps };
    let mut rows = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        if step > 0 {
            y = op.p.matmul(&y)?;
        }
        rows.push(DiffusionRow { step, dirichlet_energy: dirichlet_energy(&y, &op.s_sym)?, lambda_min: lmin, lambda_max: lmax });
    }
    let spectrum_ok = lmin >= -1e-8 && lmax <= 2.0 + 1e-8;
    let monotone_ok = rows.windows(2).all(|w| w[1].dirichlet_energy <= w[0].dirichlet_energy + 1e-9);
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)?;
    if let Some(p) = &args.out {
        fs::write(p, &csv).with_context(|| format!("cannot write {}", p.display()))?;
    }
    Ok(DiffusionAnalysis { rows, csv, spectrum_ok, monotone_ok, flow_residual })
}

fn infer_all(net: &MorphNet, data: &[SynthStream], opts: ForwardOptions) -> Result<Inference> {
    let mut all = Inference { logits: Vec::new(), traces: Vec::new(), features: Vec::new() };
    for chunk in data.chunks(INFER_BATCH) {
        let streams: Vec<&SpikeTensor> = chunk.iter().map(|s| &s.frames).collect();
        let inf = net.infer(&streams, opts)?;
        all.logits.extend(inf.logits);
        all.traces.extend(inf.traces);
        all.features.extend(inf.features);
    }
    Ok(all)
}

#[derive(Clone, Debug)]
pub struct OodArgs {
    pub train: PathBuf,
    pub id: PathBuf,
    pub ood: PathBuf,
    pub checkpoint: PathBuf,
    pub method: Method,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreRow {
    pub sample_id: usize,
    pub split: &'static str,
    pub label: usize,
    pub method: String,
    pub score: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug)]
pub struct OodOutcome {
    pub scores: OodScoreSet,
    pub metrics: OodMetrics,
    pub threshold: f64,
    pub rows: Vec<ScoreRow>,
    pub warnings: Vec<String>,
}

/// Scores every sample of `sets[1..]` with a bank fitted on `sets[0]`.
/// Returns the training-set scores first.
pub fn score_sets(net: &MorphNet, method: Method, sets: &[&[SynthStream]]) -> Result<Vec<Vec<f64>>> {
    let needs_traces = method == Method::Dgp;
    let infs = sets.iter().map(|s| infer_all(net, s, ForwardOptions::default())).collect::<Result<Vec<_>>>()?;
    let signatures = |inf: &Inference| -> Result<Vec<Vec<f64>>> {
        inf.traces.iter().enumerate().map(|(i, t)| Ok(topology_signature(t, i, false)?.z)).collect()
    };
    let train = &infs[0];
    let labels: Vec<usize> = sets[0].iter().map(|s| s.label).collect();
    let classes = net.config.classes;
    let mut out = Vec::with_capacity(sets.len());
    match method {
        Method::Dgp | Method::Scp => {
            let vecs: Vec<Vec<Vec<f64>>> = infs
                .iter()
                .map(|inf| if needs_traces { signatures(inf) } else { Ok(inf.features.clone()) })
                .collect::<Result<_>>()?;
            let pairs: Vec<(&[f64], usize)> = vecs[0].iter().map(|v| v.as_slice()).zip(labels.iter().copied()).collect();
            let bank = compute_prototypes(&pairs, classes)?;
            for v in &vecs {
                let f = if method == Method::Dgp { dgp_score } else { scp_score };
                out.push(v.iter().map(|z| f(z, &bank)).collect::<std::result::Result<Vec<_>, _>>()?);
            }
        }
        Method::Msp | Method::Energy => {
            let f = if method == Method::Msp { msp_score } else { energy_score };
            for inf in &infs {
                out.push(inf.logits.iter().map(|l| f(l)).collect());
            }
        }
        Method::Knn => {
            let k = default_knn_k(train.features.len());
            // Training samples are scored against the others, excluding themselves.
            let mut own = Vec::with_capacity(train.features.len());
            for (i, f) in train.features.iter().enumerate() {
                let rest: Vec<Vec<f64>> =
                    train.features.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v.clone()).collect();
                own.push(if rest.is_empty() { 0.0 } else { knn_score(f, &rest, k.min(rest.len()))? });
            }
            out.push(own);
            for inf in &infs[1..] {
                out.push(inf.features.iter().map(|f| knn_score(f, &train.features, k)).collect::<std::result::Result<Vec<_>, _>>()?);
            }
        }
    }
    Ok(out)
}

pub fn ood(args: &OodArgs) -> Result<OodOutcome> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let net = &ck.net;
    let train = EventFrameFile::read(&args.train)?;
    let id = EventFrameFile::read(&args.id)?;
    let ood = EventFrameFile::read(&args.ood)?;
    check_data(net, &train, &args.train)?;
    check_data(net, &id, &args.id)?;
    ensure!(
        ood.dims == id.dims,
        "{} holds {:?} streams but the ID set holds {:?}",
        args.ood.display(),
        ood.dims,
        id.dims
    );
    let mut warnings = Vec::new();
    if args.method == Method::Dgp && net.config.beta >= 1.0 {
        warnings.push(
            "checkpoint has beta = 1 (static topology): every ID signature is the same all-ones sequence, so DGP scores are degenerate"
                .to_string(),
        );
    }
    let scores = score_sets(net, args.method, &[&train.samples, &id.samples, &ood.samples])?;
    let threshold = nearest_rank(&scores[0], FLAG_PERCENTILE)?;
    let set = OodScoreSet { method: args.method, id_scores: scores[1].clone(), ood_scores: scores[2].clone() };
    let m = metrics(&set)?;
    let mut rows = Vec::new();
    for (split, file, s) in [("id", &id, &scores[1]), ("ood", &ood, &scores[2])] {
        for (i, (sample, &score)) in file.samples.iter().zip(s).enumerate() {
            rows.push(ScoreRow { sample_id: i, split, label: sample.label, method: args.method.to_string(), score, flagged: score > threshold });
        }
    }
    if let Some(p) = &args.out {
        let mut w = csv_writer(p)?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(OodOutcome { scores: set, metrics: m, threshold, rows, warnings })
}

/// Parses `a..b` or `a..=b` (both inclusive) or a single level.
pub fn parse_rho_range(s: &str) -> Result<Vec<u8>> {
    let parse = |t: &str| -> Result<u8> {
        let v: u8 = t.trim().parse().with_context(|| format!("bad intensity '{t}'"))?;
        ensure!(v <= 9, "intensity {v} outside 0..=9");
        Ok(v)
    };
    let (lo, hi) = match s.split_once("..") {
        Some((a, b)) => (parse(a)?, parse(b.strip_prefix('=').unwrap_or(b))?),
        None => {
            let v = parse(s)?;
            (v, v)
        }
    };
    ensure!(lo <= hi, "empty intensity range {s}");
    Ok((lo..=hi).collect())
}

#[derive(Clone, Debug)]
pub struct PerturbArgs {
    pub checkpoint: PathBuf,
    pub static_checkpoint: Option<PathBuf>,
    pub data: PathBuf,
    pub kinds: Vec<PerturbKind>,
    pub rhos: Vec<u8>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerturbRow {
    pub kind: String,
    pub rho: u8,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub static_accuracy: Option<f64>,
}

/// Perturbation seed for one `(kind, rho)` cell; both models see the same
/// corrupted streams.
pub fn perturb_seed(seed: u64, kind: PerturbKind, rho: u8) -> u64 {
    let k = match kind {
        PerturbKind::SaltPepper => 0,
        PerturbKind::Poisson => 1,
        PerturbKind::FrameLoss => 2,
    };
    Rng::new(seed).derive((k << 8) | rho as u64).seed()
}

pub fn perturb_eval(args: &PerturbArgs) -> Result<Vec<PerturbRow>> {
    ensure!(!args.kinds.is_empty() && !args.rhos.is_empty(), "need at least one perturbation kind and intensity");
    let full = Checkpoint::load(&args.checkpoint)?;
    let stat = args.static_checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let data = EventFrameFile::read(&args.data)?;
    check_data(&full.net, &data, &args.data)?;
    if let Some(s) = &stat {
        check_data(&s.net, &data, &args.data)?;
    }
    let mut rows = Vec::new();
    for &kind in &args.kinds {
        for &rho in &args.rhos {
            let spec = PerturbSpec::new(kind, rho)?;
            let ps = perturb_seed(args.seed, kind, rho);
            let accuracy = evaluate(&full.net, &data.samples, Some(spec), ps)?.accuracy;
            let static_accuracy = stat.as_ref().map(|s| evaluate(&s.net, &data.samples, Some(spec), ps)).transpose()?.map(|r| r.accuracy);
            rows.push(PerturbRow { kind: kind.to_string(), rho, accuracy, static_accuracy });
        }
    }
    if let Some(p) = &args.out {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(p).with_context(|| format!("cannot create {}", p.display()))?;
        if stat.is_some() {
            w.write_record(["kind", "rho", "full_accuracy", "static_accuracy"])?;
        } else {
            w.write_record(["kind", "rho", "accuracy"])?;
        }
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct EnergyArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerEnergy {
    pub layer: usize,
    /// Spatial size of the diffused node maps.
    pub node_hw: (usize, usize),
    pub gd: OpCountReport,
    pub stsp: OpCountReport,
    /// Mean spike rate per node over the dataset.
    pub firing_rates: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyReport {
    pub constants: EnergyConstants,
    pub samples: usize,
    pub layers: Vec<LayerEnergy>,
    /// Event-driven accumulates per sample, averaged.
    pub network: OpCountReport,
    /// Same run with every neuron treated as spiking.
    pub dense_bound: OpCountReport,
    pub event_fraction: f64,
    /// Structural overhead (all layers' GD plus STSP) per sample, in pJ.
    pub structural_energy_pj: f64,
    pub total_energy_mj: f64,
    /// Large-scale reference point: T=5, M=2, N=7, 32x32x32 maps.
    pub reference_gd: OpCountReport,
}

pub fn energy_report(args: &EnergyArgs) -> Result<EnergyReport> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let net = &ck.net;
    let data = EventFrameFile::read(&args.data)?;
    check_data(net, &data, &args.data)?;
    let cfg = &net.config;
    let inf = infer_all(net, &data.samples, ForwardOptions { record_spikes: true })?;
    let n = data.samples.len() as u64;
    let (mut acs, mut dense) = (0u64, 0u64);
    for traces in &inf.traces {
        acs += count_spike_acs(traces)?;
        dense += dense_spike_acs(traces)?;
    }
    let t = cfg.timesteps as u64;
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut structural = 0.0;
    for (l, layer) in net.layers.iter().enumerate() {
        let g = layer.geometry.context("layer geometry missing")?;
        let (h, w) = g.nodes;
        let (nn, c) = (cfg.nodes as u64, cfg.channels as u64);
        let gd = count_gd_ops(t, cfg.diffusion_steps as u64, nn, c, h as u64, w as u64);
        let stsp = count_stsp_ops(t, nn, c, h as u64, w as u64);
        structural += gd.energy_pj + stsp.energy_pj;
        let per_layer: Vec<&LayerTrace> = inf.traces.iter().map(|tr| &tr[l]).collect();
        layers.push(LayerEnergy { layer: l, node_hw: g.nodes, gd, stsp, firing_rates: firing_rate_report(&per_layer) });
    }
    let mut network = OpCountReport::new(Component::Network, 0, acs / n.max(1), 0);
    network.firing_rates = layers.iter().flat_map(|l| l.firing_rates.iter().copied()).collect();
    let dense_bound = OpCountReport::new(Component::Network, 0, dense / n.max(1), 0);
    let report = EnergyReport {
        constants: EnergyConstants::default(),
        samples: data.samples.len(),
        event_fraction: if dense == 0 { 0.0 } else { acs as f64 / dense as f64 },
        total_energy_mj: (network.energy_pj + structural) * 1e-9,
        structural_energy_pj: structural,
        layers,
        network,
        dense_bound,
        reference_gd: count_gd_ops(5, 2, 7, 32, 32, 32),
    };
    if let Some(p) = &args.out {
        write_json(p, &report)?;
    }
    Ok(report)
}
