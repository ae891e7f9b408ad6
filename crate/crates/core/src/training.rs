//! Synthetic event streams, perturbations, and the BPTT training loop.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::network::{argmax, ForwardOptions, MorphNet, NetConfig};
use crate::neuron::SpikeTensor;
use crate::numgrad::{Matrix, Rng, Tape, DEFAULT_SEED};
use crate::Mode;

/// Per-pixel background event probability of the moving-bar generator.
pub const BAR_NOISE: f64 = 0.02;
/// Event probability inside a flicker pattern's mask.
pub const FLICKER_INTENSITY: f64 = 0.6;
/// Base rate of injected Poisson events per pixel and frame.
pub const POISSON_BASE_RATE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// A bar sweeping in one of `classes` directions; the class is the direction.
    MovingBar,
    /// A class-specific mask re-sampled every frame, without motion.
    FlickerPattern,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moving-bar" => Ok(Self::MovingBar),
            "flicker-pattern" => Ok(Self::FlickerPattern),
            _ => Err(Error::Parameter(format!("unknown dataset '{s}' (expected moving-bar or flicker-pattern)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthStream {
    pub frames: SpikeTensor,
    pub label: usize,
}

/// Builds `classes * per_class` streams with dims `[T, C, H, W]`, shuffled.
pub fn generate_dataset(kind: DatasetKind, classes: usize, per_class: usize, dims: [usize; 4], seed: u64) -> Result<Vec<SynthStream>> {
    let [t, c, h, w] = dims;
    if h < 8 || w < 8 {
        return param_err(format!("frames must be at least 8x8, got {h}x{w}"));
    }
    if t < 4 {
        return param_err(format!("streams need at least 4 frames, got {t}"));
    }
    if c == 0 || classes == 0 {
        return param_err("channel and class counts must be positive");
    }
    let mut rng = Rng::new(seed);
    let masks: Vec<Vec<bool>> = match kind {
        DatasetKind::FlickerPattern => (0..classes).map(|k| flicker_mask(h, w, &mut rng.derive(k as u64 + 1))).collect(),
        DatasetKind::MovingBar => Vec::new(),
    };
    let mut out = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for label in 0..classes {
            let frames = match kind {
                DatasetKind::MovingBar => moving_bar(label, classes, dims, &mut rng)?,
                DatasetKind::FlickerPattern => flicker(&masks[label], dims, &mut rng)?,
            };
            out.push(SynthStream { frames, label });
        }
    }
    rng.shuffle(&mut out);
    Ok(out)
}

fn bar_mask(theta: f64, pos: f64, h: usize, w: usize) -> Vec<bool> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (cos, sin) = (theta.cos(), theta.sin());
    let mut m = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let s = (x as f64 - cx) * cos + (y as f64 - cy) * sin;
            m[y * w + x] = (s - pos).abs() < 1.0;
        }
    }
    m
}

fn moving_bar(label: usize, classes: usize, dims: [usize; 4], rng: &mut Rng) -> Result<SpikeTensor> {
    let [t, c, h, w] = dims;
    let theta = 2.0 * std::f64::consts::PI * label as f64 / classes as f64;
    let reach = (h.min(w) as f64 - 1.0) / 2.0 - 1.0;
    let offset = rng.uniform_range(-0.5, 0.5);
    let mut frames = SpikeTensor::zeros(t, c, h, w);
    let mut prev = vec![false; h * w];
    for f in 0..t {
        let pos = -reach + 2.0 * reach * f as f64 / (t - 1) as f64 + offset;
        let cur = bar_mask(theta, pos, h, w);
        for p in 0..h * w {
            let (y, x) = (p / w, p % w);
            // Polarity split: ON for pixels the bar enters, OFF for pixels it leaves.
            let on = cur[p] && !prev[p];
            let off = prev[p] && !cur[p];
            for ch in 0..c {
                let event = match (c, ch % 2) {
                    (1, _) => cur[p],
                    (_, 0) => on,
                    _ => off,
                };
                frames.set(f, ch, y, x, event || rng.bernoulli(BAR_NOISE));
            }
        }
        prev = cur;
    }
    Ok(frames)
}

fn flicker_mask(h: usize, w: usize, rng: &mut Rng) -> Vec<bool> {
    // A few rectangular blobs so class masks differ in layout.
    let mut m = vec![false; h * w];
    for _ in 0..3 {
        let (bh, bw) = (2 + rng.below(h / 3), 2 + rng.below(w / 3));
        let (y0, x0) = (rng.below(h - bh + 1), rng.below(w - bw + 1));
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                m[y * w + x] = true;
            }
        }
    }
    m
}

fn flicker(mask: &[bool], dims: [usize; 4], rng: &mut Rng) -> Result<SpikeTensor> {
    let [t, c, h, w] = dims;
    let mut frames = SpikeTensor::zeros(t, c, h, w);
    for f in 0..t {
        for ch in 0..c {
            for (p, &on) in mask.iter().enumerate() {
                if on && rng.bernoulli(FLICKER_INTENSITY) {
                    frames.set(f, ch, p / w, p % w, true);
                }
            }
        }
    }
    Ok(frames)
}

/// Repeats one static `C x H x W` frame `t` times (direct encoding).
pub fn repeat_static(frame: &[u8], t: usize, c: usize, h: usize, w: usize) -> Result<SpikeTensor> {
    if frame.len() != c * h * w {
        return param_err(format!("static frame of {} values is not {c}x{h}x{w}", frame.len()));
    }
    SpikeTensor::from_vec([t, c, h, w], frame.repeat(t))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbKind {
    SaltPepper,
    Poisson,
    FrameLoss,
}

impl std::str::FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "salt-pepper" => Ok(Self::SaltPepper),
            "poisson" => Ok(Self::Poisson),
            "frame-loss" => Ok(Self::FrameLoss),
            _ => Err(Error::Parameter(format!("unknown perturbation '{s}' (expected salt-pepper, poisson or frame-loss)"))),
        }
    }
}

impl std::fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SaltPepper => "salt-pepper",
            Self::Poisson => "poisson",
            Self::FrameLoss => "frame-loss",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub kind: PerturbKind,
    pub rho: u8,
}

impl PerturbSpec {
    pub fn new(kind: PerturbKind, rho: u8) -> Result<Self> {
        if rho > 9 {
            return param_err(format!("intensity level must lie in 0..=9, got {rho}"));
        }
        Ok(Self { kind, rho })
    }
}

/// What a perturbation touched.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PerturbStats {
    /// Pixels selected for replacement (salt-pepper).
    pub selected: usize,
    /// Frames zeroed (frame loss).
    pub dropped_frames: usize,
    /// Injected events before clamping (Poisson).
    pub injected: usize,
}

pub fn perturb(stream: &SynthStream, spec: PerturbSpec, rng: &mut Rng) -> Result<SynthStream> {
    perturb_with_stats(stream, spec, rng).map(|(s, _)| s)
}

pub fn perturb_with_stats(stream: &SynthStream, spec: PerturbSpec, rng: &mut Rng) -> Result<(SynthStream, PerturbStats)> {
    let spec = PerturbSpec::new(spec.kind, spec.rho)?;
    let mut out = stream.clone();
    let mut stats = PerturbStats::default();
    if spec.rho == 0 {
        return Ok((out, stats));
    }
    let rho = spec.rho as f64;
    let t = out.frames.timesteps();
    match spec.kind {
        PerturbKind::SaltPepper => {
            let p = rho * 0.02;
            for f in 0..t {
                for v in out.frames.frame_mut(f) {
                    if rng.bernoulli(p) {
                        stats.selected += 1;
                        *v = rng.bernoulli(0.5) as u8;
                    }
                }
            }
        }
        PerturbKind::Poisson => {
            let rate = rho * POISSON_BASE_RATE;
            for f in 0..t {
                for v in out.frames.frame_mut(f) {
                    let n = rng.poisson(rate);
                    if n > 0 {
                        stats.injected += n as usize;
                        *v = 1;
                    }
                }
            }
        }
        PerturbKind::FrameLoss => {
            let p = rho * 0.05;
            for f in 0..t {
                if rng.bernoulli(p) {
                    stats.dropped_frames += 1;
                    out.frames.frame_mut(f).fill(0);
                }
            }
        }
    }
    Ok((out, stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", deny_unknown_fields)]
pub enum Schedule {
    Cosine,
    Step { step_size: usize, gamma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Learned dynamic topology.
    Full,
    /// `beta = 1`: the adjacency stays at its all-ones prior.
    Static,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub variant: Variant,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            schedule: Schedule::Cosine,
            seed: DEFAULT_SEED,
            variant: Variant::Full,
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return param_err("epochs and batch size must be positive");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return param_err(format!("learning rate must be finite and nonnegative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return param_err("momentum must lie in [0, 1) and weight decay must be nonnegative");
        }
        if let Schedule::Step { step_size, gamma } = self.schedule {
            if step_size == 0 || !(gamma > 0.0 && gamma <= 1.0) {
                return param_err("step schedule needs step_size > 0 and gamma in (0, 1]");
            }
        }
        self.net_config().validate()
    }

    /// Network config with the variant applied.
    pub fn net_config(&self) -> NetConfig {
        let mut n = self.net.clone();
        if self.variant == Variant::Static {
            n.beta = 1.0;
        }
        n
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Cosine => self.lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / self.epochs as f64).cos()),
            Schedule::Step { step_size, gamma } => self.lr * gamma.powi((epoch / step_size) as i32),
        }
    }
}

/// SGD with heavy-ball momentum: `v ← μv + g + wd·p`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Matrix>,
}

impl Sgd {
    pub fn new(net: &MorphNet, momentum: f64, weight_decay: f64) -> Self {
        let velocity = net.params().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { momentum, weight_decay, velocity }
    }

    pub fn step(&mut self, net: &mut MorphNet, grads: &[Matrix], lr: f64) {
        for ((p, g), v) in net.params_mut().into_iter().zip(grads).zip(&mut self.velocity) {
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv + self.weight_decay * *pv;
                *pv -= lr * *vv;
            }
        }
    }
}

/// Result of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub energy_sum: f64,
    pub energy_count: usize,
    pub rate_sum: f64,
    pub rate_count: usize,
}

/// Loss and parameter gradients of one train-mode batch (no update).
pub fn batch_gradients(net: &MorphNet, batch: &[&SynthStream], rng: &mut Rng) -> Result<(Vec<Matrix>, StepStats, Vec<crate::network::BnObservation>)> {
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape, true)?;
    let streams: Vec<&SpikeTensor> = batch.iter().map(|s| &s.frames).collect();
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let out = net.forward(&mut tape, &vars, &streams, Mode::Train, rng, ForwardOptions::default())?;
    let loss = tape.cross_entropy(out.logits, &labels)?;
    tape.backward(loss)?;
    let grads = vars.all().into_iter().map(|v| tape.grad_or_zeros(v)).collect();
    let lg = tape.value(out.logits);
    let correct = (0..lg.rows()).filter(|&r| argmax(lg.row(r)) == labels[r]).count();
    let mut stats = StepStats {
        loss: tape.value(loss).item(),
        correct,
        energy_sum: 0.0,
        energy_count: 0,
        rate_sum: 0.0,
        rate_count: 0,
    };
    for rec in out.traces.iter().flatten().flat_map(|t| t.records.iter()) {
        stats.energy_sum += rec.dirichlet_energy;
        stats.energy_count += 1;
        stats.rate_sum += rec.firing_rates.iter().sum::<f64>();
        stats.rate_count += rec.firing_rates.len();
    }
    Ok((grads, stats, out.bn))
}

/// One forward/backward/update on a batch; returns the batch statistics.
pub fn train_step(net: &mut MorphNet, opt: &mut Sgd, batch: &[&SynthStream], lr: f64, rng: &mut Rng) -> Result<StepStats> {
    let (grads, stats, bn) = batch_gradients(net, batch, rng)?;
    if stats.loss.is_finite() {
        opt.step(net, &grads, lr);
        net.apply_bn(&bn);
    }
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub mean_dirichlet_energy: f64,
    pub mean_firing_rate: f64,
}

/// Trains in place; `on_epoch` sees each epoch's metrics as they complete.
pub fn train(
    net: &mut MorphNet,
    data: &[SynthStream],
    test: Option<&[SynthStream]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut rng = Rng::new(cfg.seed).derive(0x0074_7261_696e);
    let mut opt = Sgd::new(net, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let lr = cfg.lr_at(epoch);
        let (mut loss, mut correct, mut e_sum, mut e_n, mut r_sum, mut r_n) = (0.0, 0, 0.0, 0, 0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SynthStream> = chunk.iter().map(|&i| &data[i]).collect();
            let s = train_step(net, &mut opt, &batch, lr, &mut rng)?;
            if !s.loss.is_finite() {
                return Err(Error::Divergence { epoch: epoch + 1, detail: format!("batch loss is {}", s.loss) });
            }
            loss += s.loss * batch.len() as f64;
            correct += s.correct;
            e_sum += s.energy_sum;
            e_n += s.energy_count;
            r_sum += s.rate_sum;
            r_n += s.rate_count;
        }
        let test_acc = match test {
            Some(t) if !t.is_empty() => Some(evaluate(net, t, None, 0)?.accuracy),
            _ => None,
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            loss: loss / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
            test_acc,
            mean_dirichlet_energy: e_sum / e_n.max(1) as f64,
            mean_firing_rate: r_sum / r_n.max(1) as f64,
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub per_class_count: Vec<usize>,
    /// `[layer][node]` mean spike rate.
    pub firing_rates: Vec<Vec<f64>>,
}

const EVAL_BATCH: usize = 32;

/// Eval-mode accuracy, optionally after perturbing each stream with an RNG
/// seeded by `perturb_seed`.
pub fn evaluate(net: &MorphNet, data: &[SynthStream], perturb_spec: Option<PerturbSpec>, perturb_seed: u64) -> Result<EvalReport> {
    let classes = net.config.classes;
    let mut correct = vec![0usize; classes];
    let mut count = vec![0usize; classes];
    let layers = net.layers.len();
    let nodes = net.config.nodes;
    let mut rate_sum = vec![vec![0.0; nodes]; layers];
    let mut rate_n = 0usize;
    let mut rng = Rng::new(perturb_seed);
    let perturbed: Vec<SynthStream>;
    let data: &[SynthStream] = match perturb_spec {
        Some(spec) if spec.rho > 0 => {
            perturbed = data.iter().map(|s| perturb(s, spec, &mut rng)).collect::<Result<_>>()?;
            &perturbed
        }
        _ => data,
    };
    for chunk in data.chunks(EVAL_BATCH) {
        let streams: Vec<&SpikeTensor> = chunk.iter().map(|s| &s.frames).collect();
        let inf = net.infer(&streams, ForwardOptions::default())?;
        for (b, s) in chunk.iter().enumerate() {
            if s.label >= classes {
                return Err(Error::Data(format!("label {} outside {classes} classes", s.label)));
            }
            count[s.label] += 1;
            if argmax(&inf.logits[b]) == s.label {
                correct[s.label] += 1;
            }
            for (l, trace) in inf.traces[b].iter().enumerate() {
                for rec in &trace.records {
                    for (i, r) in rec.firing_rates.iter().enumerate() {
                        rate_sum[l][i] += r;
                    }
                }
            }
            rate_n += net.config.timesteps;
        }
    }
    let total: usize = count.iter().sum();
    Ok(EvalReport {
        accuracy: correct.iter().sum::<usize>() as f64 / total.max(1) as f64,
        per_class_accuracy: correct.iter().zip(&count).map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect(),
        per_class_count: count,
        firing_rates: rate_sum.into_iter().map(|v| v.into_iter().map(|s| s / rate_n.max(1) as f64).collect()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_bar_class_zero_moves_right() {
        let mut rng = Rng::new(3);
        let frames = moving_bar(0, 4, [6, 1, 16, 16], &mut rng).unwrap();
        let mut last = None;
        for t in 0..6 {
            let mut cols = [0usize; 16];
            for y in 0..16 {
                for x in 0..16 {
                    cols[x] += frames.get(t, 0, y, x) as usize;
                }
            }
            let best = (0..16).max_by_key(|&x| cols[x]).unwrap();
            if let Some(prev) = last {
                assert!(best > prev, "t={t}: column {best} after {prev}");
            }
            last = Some(best);
        }
    }

    #[test]
    fn dataset_is_deterministic_and_balanced() {
        let a = generate_dataset(DatasetKind::MovingBar, 4, 3, [5, 2, 16, 16], 7).unwrap();
        let b = generate_dataset(DatasetKind::MovingBar, 4, 3, [5, 2, 16, 16], 7).unwrap();
        assert_eq!(a, b);
        for k in 0..4 {
            assert_eq!(a.iter().filter(|s| s.label == k).count(), 3);
        }
        assert!(generate_dataset(DatasetKind::MovingBar, 4, 1, [5, 2, 6, 6], 1).is_err());
        assert!(generate_dataset(DatasetKind::MovingBar, 4, 1, [3, 2, 16, 16], 1).is_err());
    }

    #[test]
    fn rho_zero_is_identity() {
        let data = generate_dataset(DatasetKind::MovingBar, 2, 1, [5, 2, 8, 8], 1).unwrap();
        let mut rng = Rng::new(1);
        for kind in [PerturbKind::SaltPepper, PerturbKind::Poisson, PerturbKind::FrameLoss] {
            assert_eq!(perturb(&data[0], PerturbSpec { kind, rho: 0 }, &mut rng).unwrap(), data[0]);
        }
        assert!(PerturbSpec::new(PerturbKind::Poisson, 10).is_err());
        assert!("gaussian".parse::<PerturbKind>().is_err());
    }

    #[test]
    fn schedules() {
        let mut cfg = TrainConfig { epochs: 10, lr: 0.2, ..TrainConfig::default() };
        assert_eq!(cfg.lr_at(0), 0.2);
        assert!((cfg.lr_at(5) - 0.1).abs() < 1e-15);
        cfg.schedule = Schedule::Step { step_size: 3, gamma: 0.5 };
        assert_eq!(cfg.lr_at(2), 0.2);
        assert_eq!(cfg.lr_at(3), 0.1);
        assert_eq!(cfg.lr_at(6), 0.05);
    }

    #[test]
    fn static_variant_sets_beta() {
        let cfg = TrainConfig { variant: Variant::Static, ..TrainConfig::default() };
        assert_eq!(cfg.net_config().beta, 1.0);
    }
}
