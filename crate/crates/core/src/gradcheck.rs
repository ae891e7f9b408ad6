//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::network::{ForwardOptions, MorphNet};
use crate::neuron::SpikeTensor;
use crate::numgrad::{Matrix, Rng, Tape, Var};
use crate::Mode;

/// A differentiable function of tape leaves.
pub type OpFn<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).expect("sized buffer")
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(n)).max(1e-8)
}

/// Worst per-input relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between the
/// tape gradient of `Σ R ⊙ f(inputs)` and central differences, for a fixed
/// random probe `R`.
pub fn op_relative_error(inputs: &[Matrix], f: &OpFn, eps: f64) -> Result<f64> {
    let forward = |xs: &[Matrix], tape: &mut Tape| -> Result<(Vec<Var>, Var)> {
        let vars: Vec<Var> = xs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(tape, &vars)?;
        Ok((vars, out))
    };
    let probe = {
        let mut tape = Tape::new();
        let (_, out) = forward(inputs, &mut tape)?;
        let (r, c) = tape.shape(out);
        random(r, c, &mut Rng::new(99))
    };
    let loss_of = |xs: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let (_, out) = forward(xs, &mut tape)?;
        Ok(tape.value(out).hadamard(&probe)?.sum())
    };
    let mut tape = Tape::new();
    let (vars, out) = forward(inputs, &mut tape)?;
    let r = tape.constant(probe.clone());
    let weighted = tape.mul(out, r)?;
    let loss = tape.sum(weighted);
    tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad_or_zeros(*v);
        let mut numeric = vec![0.0; analytic.len()];
        for (idx, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[idx] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[idx] -= eps;
            *slot = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * eps);
        }
        worst = worst.max(rel_err(analytic.data(), &numeric));
    }
    Ok(worst)
}

/// Train-mode cross-entropy with a fixed dropout seed, so perturbed copies
/// see identical masks.
pub fn network_loss(net: &MorphNet, data: &[SpikeTensor], labels: &[usize], dropout_seed: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape, false)?;
    let refs: Vec<&SpikeTensor> = data.iter().collect();
    let mut rng = Rng::new(dropout_seed);
    let out = net.forward(&mut tape, &vars, &refs, Mode::Train, &mut rng, ForwardOptions::default())?;
    let loss = tape.cross_entropy(out.logits, labels)?;
    Ok(tape.value(loss).item())
}

/// Worst per-tensor relative error of the network loss gradient, sampling up
/// to `max_entries` coordinates of each parameter tensor.
pub fn network_relative_error(net: &MorphNet, data: &[SpikeTensor], labels: &[usize], eps: f64, max_entries: usize) -> Result<f64> {
    const DROPOUT_SEED: u64 = 7;
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape, true)?;
    let refs: Vec<&SpikeTensor> = data.iter().collect();
    let mut rng = Rng::new(DROPOUT_SEED);
    let out = net.forward(&mut tape, &vars, &refs, Mode::Train, &mut rng, ForwardOptions::default())?;
    let loss = tape.cross_entropy(out.logits, labels)?;
    tape.backward(loss)?;
    let analytic: Vec<Matrix> = vars.all().into_iter().map(|v| tape.grad_or_zeros(v)).collect();

    let mut pick = Rng::new(13);
    let mut worst: f64 = 0.0;
    for (k, g) in analytic.iter().enumerate() {
        let idxs: Vec<usize> = if g.len() <= max_entries {
            (0..g.len()).collect()
        } else {
            (0..max_entries).map(|_| pick.below(g.len())).collect()
        };
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for &i in &idxs {
            let mut plus = net.clone();
            plus.params_mut()[k].data_mut()[i] += eps;
            let mut minus = net.clone();
            minus.params_mut()[k].data_mut()[i] -= eps;
            n.push((network_loss(&plus, data, labels, DROPOUT_SEED)? - network_loss(&minus, data, labels, DROPOUT_SEED)?) / (2.0 * eps));
            a.push(g.data()[i]);
        }
        worst = worst.max(rel_err(&a, &n));
    }
    Ok(worst)
}
