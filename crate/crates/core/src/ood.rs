//! Out-of-distribution scoring from learned topology and logits.
//!
//! Every method is oriented so that a higher score means more anomalous.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::LayerTrace;
use crate::numgrad::logsumexp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dgp,
    Msp,
    Energy,
    Knn,
    Scp,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Dgp, Method::Msp, Method::Energy, Method::Knn, Method::Scp];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Dgp => "dgp",
            Method::Msp => "msp",
            Method::Energy => "energy",
            Method::Knn => "knn",
            Method::Scp => "scp",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown OOD method '{s}' (expected dgp, msp, energy, knn or scp)")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologySignature {
    pub z: Vec<f64>,
    pub sample_id: usize,
}

/// Flattened adjacency sequence, timestep-major within each layer, layers
/// concatenated. Uses the dense `S` unless `pruned` selects `Ŝ`.
pub fn topology_signature(traces: &[LayerTrace], sample_id: usize, pruned: bool) -> Result<TopologySignature> {
    if traces.is_empty() {
        return Err(Error::Contract("no layer traces to build a signature from".into()));
    }
    let mut z = Vec::new();
    for (l, trace) in traces.iter().enumerate() {
        if trace.records.is_empty() {
            return Err(Error::Contract(format!("layer {l} trace has no adjacency records")));
        }
        for r in &trace.records {
            let m = if pruned { &r.s_pruned } else { &r.s };
            z.extend_from_slice(m.data());
        }
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract(format!("signature of sample {sample_id} has non-finite entries")));
    }
    Ok(TopologySignature { z, sample_id })
}

/// Class centroids and the flagging threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub centroids: Vec<Vec<f64>>,
    pub kappa: f64,
}

/// Nearest-rank percentile (`p` in `(0, 100]`).
pub fn nearest_rank(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Data("percentile of an empty set".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Ok(v[rank.min(v.len()) - 1])
}

/// Per-class means of labeled vectors; `kappa` is the 95th percentile of the
/// training vectors' own scores.
pub fn compute_prototypes(samples: &[(&[f64], usize)], classes: usize) -> Result<PrototypeBank> {
    let dim = samples.first().map(|s| s.0.len()).ok_or_else(|| Error::Data("no samples for prototypes".into()))?;
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (z, label) in samples {
        if z.len() != dim {
            return Err(Error::Dimension(format!("feature of length {} among length-{dim} features", z.len())));
        }
        if *label >= classes {
            return Err(Error::Data(format!("label {label} outside {classes} classes")));
        }
        for (s, v) in sums[*label].iter_mut().zip(z.iter()) {
            *s += v;
        }
        counts[*label] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("class {c} has no samples")));
    }
    let centroids: Vec<Vec<f64>> =
        sums.into_iter().zip(&counts).map(|(s, &n)| s.into_iter().map(|v| v / n as f64).collect()).collect();
    let mut bank = PrototypeBank { centroids, kappa: 0.0 };
    let scores = samples.iter().map(|(z, _)| dgp_score(z, &bank)).collect::<Result<Vec<_>>>()?;
    bank.kappa = nearest_rank(&scores, 95.0)?;
    Ok(bank)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Distance to the nearest prototype.
pub fn dgp_score(z: &[f64], bank: &PrototypeBank) -> Result<f64> {
    let mut best = f64::INFINITY;
    for mu in &bank.centroids {
        if mu.len() != z.len() {
            return Err(Error::Dimension(format!("signature length {} vs prototype length {}", z.len(), mu.len())));
        }
        best = best.min(euclidean(z, mu));
    }
    Ok(best)
}

impl PrototypeBank {
    pub fn flags(&self, score: f64) -> bool {
        score > self.kappa
    }
}

/// Same nearest-prototype rule over firing-rate features.
pub fn scp_score(firing: &[f64], bank: &PrototypeBank) -> Result<f64> {
    dgp_score(firing, bank)
}

/// `1 − max softmax(logits)`.
pub fn msp_score(logits: &[f64]) -> f64 {
    let lse = logsumexp(logits);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    1.0 - (max - lse).exp()
}

/// `−logsumexp(logits)`.
pub fn energy_score(logits: &[f64]) -> f64 {
    -logsumexp(logits)
}

/// `k = 10`, or a tenth of the training set when that is smaller (at least 1).
pub fn default_knn_k(train_len: usize) -> usize {
    (train_len / 10).clamp(1, 10)
}

/// Distance to the `k`-th nearest training feature.
pub fn knn_score(feature: &[f64], train: &[Vec<f64>], k: usize) -> Result<f64> {
    if k == 0 || k > train.len() {
        return Err(Error::Parameter(format!("k = {k} with {} training features", train.len())));
    }
    let mut d = train
        .iter()
        .map(|t| {
            if t.len() != feature.len() {
                Err(Error::Dimension(format!("feature length {} vs training length {}", feature.len(), t.len())))
            } else {
                Ok(euclidean(feature, t))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    d.sort_by(f64::total_cmp);
    Ok(d[k - 1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodScoreSet {
    pub method: Method,
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodMetrics {
    pub auroc: f64,
    pub aupr_out: f64,
    pub fpr95: f64,
}

/// AUROC (rank statistic, ties ½), AUPR with OOD positive, and the ID false
/// positive rate at 95% OOD detection.
pub fn metrics(scores: &OodScoreSet) -> Result<OodMetrics> {
    let (id, ood) = (&scores.id_scores, &scores.ood_scores);
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Data("metrics need nonempty ID and OOD score sets".into()));
    }
    Ok(OodMetrics { auroc: auroc(id, ood), aupr_out: aupr_out(id, ood), fpr95: fpr95(id, ood) })
}

pub fn auroc(id: &[f64], ood: &[f64]) -> f64 {
    // Mann-Whitney U with midranks.
    let mut all: Vec<(f64, bool)> = id.iter().map(|&s| (s, false)).chain(ood.iter().map(|&s| (s, true))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += all[i..=j].iter().filter(|e| e.1).count() as f64 * mid;
        i = j + 1;
    }
    let (n_o, n_i) = (ood.len() as f64, id.len() as f64);
    (rank_sum - n_o * (n_o + 1.0) / 2.0) / (n_o * n_i)
}

pub fn aupr_out(id: &[f64], ood: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = id.iter().map(|&s| (s, false)).chain(ood.iter().map(|&s| (s, true))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_pos = ood.len() as f64;
    let (mut tp, mut fp, mut ap) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let pos = all[i..=j].iter().filter(|e| e.1).count() as f64;
        tp += pos;
        fp += (j - i + 1) as f64 - pos;
        ap += pos / n_pos * tp / (tp + fp);
        i = j + 1;
    }
    ap
}

pub fn fpr95(id: &[f64], ood: &[f64]) -> f64 {
    let mut o = ood.to_vec();
    o.sort_by(f64::total_cmp);
    let need = (95 * o.len()).div_ceil(100);
    let threshold = o[o.len() - need];
    id.iter().filter(|&&s| s >= threshold).count() as f64 / id.len() as f64
}
