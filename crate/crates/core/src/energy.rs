//! Synaptic-operation counts and picojoule estimates.
//!
//! Constants follow 45nm CMOS figures: a 32-bit MAC costs 4.6 pJ, an
//! accumulate 0.9 pJ, so a multiply is taken as the difference.

use serde::Serialize;

use crate::error::{param_err, Result};
use crate::network::LayerTrace;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EnergyConstants {
    pub e_mac: f64,
    pub e_ac: f64,
    pub e_mul: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        Self { e_mac: 4.6, e_ac: 0.9, e_mul: 3.7 }
    }
}

impl EnergyConstants {
    pub fn energy_pj(&self, muls: u64, acs: u64, macs: u64) -> f64 {
        muls as f64 * self.e_mul + acs as f64 * self.e_ac + macs as f64 * self.e_mac
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Gd,
    Stsp,
    Network,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCountReport {
    pub component: Component,
    pub muls: u64,
    pub acs: u64,
    pub macs: u64,
    pub energy_pj: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub firing_rates: Vec<f64>,
}

impl OpCountReport {
    pub fn new(component: Component, muls: u64, acs: u64, macs: u64) -> Self {
        let energy_pj = EnergyConstants::default().energy_pj(muls, acs, macs);
        Self { component, muls, acs, macs, energy_pj, firing_rates: Vec::new() }
    }

    pub fn energy_mj(&self) -> f64 {
        self.energy_pj * 1e-9
    }
}

/// Dense diffusion counts: `T·M·N²·CHW` multiplies and `T·M·N(N−1)·CHW`
/// accumulates.
pub fn count_gd_ops(t: u64, m: u64, n: u64, c: u64, h: u64, w: u64) -> OpCountReport {
    let chw = c * h * w;
    let muls = t * m * n * n * chw;
    let acs = t * m * n * (n - n.min(1)) * chw;
    OpCountReport::new(Component::Gd, muls, acs, 0)
}

/// Structure-learning counts:
/// ACs `T·[CHW + 2NC(C−1) + N²(C−1)]`,
/// MACs `T·[NC² + 2NC + (2NC² + N²C) + 2N²]`.
pub fn count_stsp_ops(t: u64, n: u64, c: u64, h: u64, w: u64) -> OpCountReport {
    let cm1 = c.saturating_sub(1);
    let acs = t * (c * h * w + 2 * n * c * cm1 + n * n * cm1);
    let macs = t * (n * c * c + 2 * n * c + (2 * n * c * c + n * n * c) + 2 * n * n);
    OpCountReport::new(Component::Stsp, 0, acs, macs)
}

/// Number of output positions of a same-padded 3x3 conv that read input
/// position `(y, x)` of an `h x w` map.
pub fn conv_taps(y: usize, x: usize, h: usize, w: usize) -> u64 {
    let span = |p: usize, n: usize| (p.saturating_sub(1)..=(p + 1).min(n - 1)).count() as u64;
    span(y, h) * span(x, w)
}

/// Spike count of a binary map weighted by its conv fan-out
/// (in-bounds taps times `c_out`).
pub fn conv_fanout_acs(spikes: &[u8], channels: usize, h: usize, w: usize, c_out: usize) -> Result<u64> {
    if spikes.len() != channels * h * w {
        return param_err(format!("spike map of {} entries is not {channels}x{h}x{w}", spikes.len()));
    }
    let mut total = 0;
    for c in 0..channels {
        for y in 0..h {
            for x in 0..w {
                if spikes[(c * h + y) * w + x] != 0 {
                    total += conv_taps(y, x, h, w);
                }
            }
        }
    }
    Ok(total * c_out as u64)
}

/// Event-driven accumulates `Σ_t Σ_l Σ_i f_i s_i[t]`: every spike of node `i`
/// pays its conv fan-out into a `C_out`-channel 3x3 conv at the map's own
/// resolution, plus one accumulate per off-diagonal edge of `Ŝ` in row `i`.
pub fn count_spike_acs(traces: &[LayerTrace]) -> Result<u64> {
    count_acs(traces, false)
}

/// Dense bound for the same run: every neuron treated as spiking.
pub fn dense_spike_acs(traces: &[LayerTrace]) -> Result<u64> {
    count_acs(traces, true)
}

fn count_acs(traces: &[LayerTrace], dense: bool) -> Result<u64> {
    let mut total = 0;
    for trace in traces {
        let c = trace.channels;
        for rec in &trace.records {
            let Some(maps) = &rec.spikes else {
                return param_err("trace has no spike maps; record spikes to count events");
            };
            for (i, map) in maps.iter().enumerate() {
                let (h, w) = if i == 0 { trace.geometry.input } else { trace.geometry.nodes };
                let edges = (0..rec.s_pruned.cols()).filter(|&j| j != i && rec.s_pruned.get(i, j) != 0.0).count() as u64;
                let (conv, count) = if dense {
                    (conv_fanout_acs(&vec![1; map.len()], c, h, w, c)?, map.len() as u64)
                } else {
                    (conv_fanout_acs(map, c, h, w, c)?, map.iter().filter(|&&s| s != 0).count() as u64)
                };
                total += conv + edges * count;
            }
        }
    }
    Ok(total)
}

/// Per-node mean spike rate over every record of every trace, from the
/// binary maps when present and the recorded rates otherwise.
pub fn firing_rate_report(traces: &[&LayerTrace]) -> Vec<f64> {
    let nodes = traces.iter().flat_map(|t| t.records.iter()).map(|r| r.firing_rates.len()).max().unwrap_or(0);
    let mut sums = vec![0.0; nodes];
    let mut counts = vec![0usize; nodes];
    for rec in traces.iter().flat_map(|t| t.records.iter()) {
        match &rec.spikes {
            Some(maps) => {
                for (i, m) in maps.iter().enumerate() {
                    sums[i] += m.iter().map(|&s| s as f64).sum::<f64>();
                    counts[i] += m.len();
                }
            }
            None => {
                for (i, r) in rec.firing_rates.iter().enumerate() {
                    sums[i] += r;
                    counts[i] += 1;
                }
            }
        }
    }
    sums.iter().zip(&counts).map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 }).collect()
}
