//! Dense numerics and the reverse-mode gradient tape.

mod eigen;
mod matrix;
mod rng;
mod tape;

pub use eigen::{spectral_range, symmetric_eigenvalues};
pub use matrix::Matrix;
pub use rng::{Rng, DEFAULT_SEED};
pub use tape::{arctan_surrogate, sigmoid, BnBatchStats, ConvGeom, SpikeFn, Tape, Var};

use crate::error::{param_err, Result};

/// `softmax(row / tau)`, computed with max-subtraction.
pub fn softmax_temperature(row: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return param_err(format!("softmax temperature must be positive, got {tau}"));
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    Ok(out)
}

/// `log(sum(exp(row)))`, stable for large magnitudes.
pub fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn log_softmax_at(row: &[f64], index: usize) -> f64 {
    row[index] - logsumexp(row)
}
