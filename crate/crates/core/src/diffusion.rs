//! Symmetric normalized graph diffusion and its Dirichlet-energy view.
//!
//! `P = D^{-1/2} S_sym D^{-1/2}` with `S_sym = (Ŝ + Ŝᵀ)/2` and no added self
//! loops. One diffusion step `Y ← P·Y` equals an explicit gradient step of
//! size 0.5 on `E(Y) = tr(Yᵀ L Y)`, `L = Id − P`, whose spectrum lies in
//! [0, 2]; step sizes above 0.5 amplify the λ = 2 modes.

use crate::error::{dim_err, Error, Result};
use crate::numgrad::{spectral_range, Matrix, Tape, Var};

/// Lower bound applied to node degrees so isolated nodes stay finite.
pub const DEGREE_FLOOR: f64 = 1e-12;

/// Degree-normalized diffusion operator for one adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionOperator {
    pub p: Matrix,
    pub s_sym: Matrix,
    pub degree: Vec<f64>,
    pub steps: usize,
}

/// Node signals stacked row-wise (`N x features`).
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSignal(pub Matrix);

impl GraphSignal {
    pub fn nodes(&self) -> usize {
        self.0.rows()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }
}

impl DiffusionOperator {
    /// `L = Id − P`.
    pub fn laplacian(&self) -> Matrix {
        let n = self.p.rows();
        Matrix::identity(n).sub(&self.p).expect("square operator")
    }

    /// Spectral ranges of `P` and of `L`.
    pub fn spectral_bounds(&self) -> Result<((f64, f64), (f64, f64))> {
        Ok((spectral_range(&self.p)?, spectral_range(&self.laplacian())?))
    }
}

/// Tape form of operator construction; returns `(P, S_sym)`.
pub fn build_operator_tape(tape: &mut Tape, s_hat: Var) -> Result<(Var, Var)> {
    let (r, c) = tape.shape(s_hat);
    if r != c {
        return dim_err(format!("adjacency must be square, got {r}x{c}"));
    }
    let t = tape.transpose(s_hat);
    let both = tape.add(s_hat, t)?;
    let s_sym = tape.scale(both, 0.5);
    let deg = tape.sum_rows(s_sym);
    // Flooring as an additive constant keeps the gradient of connected
    // degrees exact.
    let lift: Vec<f64> = tape.value(deg).data().iter().map(|&d| d.max(DEGREE_FLOOR) - d).collect();
    let deg = if lift.iter().any(|&v| v != 0.0) {
        let l = tape.constant(Matrix::column_vector(&lift));
        tape.add(deg, l)?
    } else {
        deg
    };
    let inv_sqrt = tape.powf(deg, -0.5);
    let inv_sqrt_t = tape.transpose(inv_sqrt);
    let outer = tape.matmul(inv_sqrt, inv_sqrt_t)?;
    let p = tape.mul(s_sym, outer)?;
    Ok((p, s_sym))
}

/// Builds the diffusion operator of a nonnegative adjacency.
pub fn build_operator(s_hat: &Matrix, steps: usize) -> Result<DiffusionOperator> {
    if let Some(bad) = s_hat.data().iter().find(|&&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Contract(format!("adjacency entries must be finite and nonnegative, found {bad}")));
    }
    let mut tape = Tape::new();
    let s = tape.constant(s_hat.clone());
    let (p, s_sym) = build_operator_tape(&mut tape, s)?;
    let s_sym = tape.value(s_sym).clone();
    let degree = (0..s_sym.rows()).map(|i| s_sym.row(i).iter().sum::<f64>().max(DEGREE_FLOOR)).collect();
    Ok(DiffusionOperator { p: tape.value(p).clone(), s_sym, degree, steps })
}

/// Graph signal with the flattened source map in row 0 and zeros elsewhere.
pub fn init_signal(source_out: &[f64], nodes: usize) -> Result<GraphSignal> {
    if nodes == 0 {
        return dim_err("graph signal needs at least one node");
    }
    let mut x = Matrix::zeros(nodes, source_out.len());
    x.row_mut(0).copy_from_slice(source_out);
    Ok(GraphSignal(x))
}

/// `Y = P^M · X` as `M` sequential products.
pub fn diffuse_tape(tape: &mut Tape, p: Var, x: Var, steps: usize) -> Result<Var> {
    let mut y = x;
    for _ in 0..steps {
        y = tape.matmul(p, y)?;
    }
    Ok(y)
}

/// Diffused signal; rows `1..N` are the inputs of the non-source nodes.
pub fn diffuse(op: &DiffusionOperator, x: &GraphSignal) -> Result<GraphSignal> {
    if op.p.cols() != x.0.rows() {
        return dim_err(format!("operator is {:?}, signal has {} rows", op.p.shape(), x.0.rows()));
    }
    let mut y = x.0.clone();
    for _ in 0..op.steps {
        y = op.p.matmul(&y)?;
    }
    Ok(GraphSignal(y))
}

fn normalized_laplacian(s_sym: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    if s_sym.rows() != s_sym.cols() {
        return dim_err(format!("adjacency must be square, got {:?}", s_sym.shape()));
    }
    if s_sym.max_asymmetry() > 1e-12 {
        return Err(Error::Contract("Dirichlet energy needs a symmetric adjacency".into()));
    }
    if s_sym.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Contract("Dirichlet energy needs a nonnegative adjacency".into()));
    }
    let n = s_sym.rows();
    let deg: Vec<f64> = (0..n).map(|i| s_sym.row(i).iter().sum::<f64>().max(DEGREE_FLOOR)).collect();
    let mut l = Matrix::identity(n);
    for i in 0..n {
        for j in 0..n {
            let v = l.get(i, j) - s_sym.get(i, j) / (deg[i].sqrt() * deg[j].sqrt());
            l.set(i, j, v);
        }
    }
    Ok((l, deg))
}

/// `E = tr(Yᵀ L_norm Y)`.
pub fn dirichlet_energy(y: &Matrix, s_sym: &Matrix) -> Result<f64> {
    let (l, _) = normalized_laplacian(s_sym)?;
    let ly = l.matmul(y)?;
    Ok(ly.data().iter().zip(y.data()).map(|(a, b)| a * b).sum())
}

/// `½ Σ_ij S_ij ‖y_i/√d_i − y_j/√d_j‖²`; independent route to the same energy
/// when every node has an edge. An isolated node keeps `L_ii = 1` in the
/// trace form but contributes nothing here.
pub fn dirichlet_energy_pairwise(y: &Matrix, s_sym: &Matrix) -> Result<f64> {
    let (_, deg) = normalized_laplacian(s_sym)?;
    if y.rows() != s_sym.rows() {
        return dim_err(format!("signal has {} rows for {} nodes", y.rows(), s_sym.rows()));
    }
    let n = s_sym.rows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let w = s_sym.get(i, j);
            if w == 0.0 {
                continue;
            }
            let (si, sj) = (deg[i].sqrt(), deg[j].sqrt());
            let d2: f64 = y.row(i).iter().zip(y.row(j)).map(|(a, b)| (a / si - b / sj).powi(2)).sum();
            total += w * d2;
        }
    }
    Ok(0.5 * total)
}

/// `‖P·Y − (Id − 2·0.5·L)·Y‖_F`; zero up to rounding.
pub fn verify_gradient_flow(op: &DiffusionOperator, y: &Matrix) -> Result<f64> {
    let direct = op.p.matmul(y)?;
    let euler = euler_step(op, y, 0.5)?;
    Ok(direct.sub(&euler)?.frobenius_norm())
}

/// Explicit gradient step on the Dirichlet energy: `(Id − 2η·L)·Y`.
pub fn euler_step(op: &DiffusionOperator, y: &Matrix, eta: f64) -> Result<Matrix> {
    let n = op.p.rows();
    let map = Matrix::identity(n).sub(&op.laplacian().scale(2.0 * eta))?;
    map.matmul(y)
}

/// Energies `E_k = E(P^k · Y0)` for `k = 0..=steps`.
pub fn energy_decay_profile(op: &DiffusionOperator, y0: &Matrix, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Parameter("energy profile needs at least one step".into()));
    }
    let mut y = y0.clone();
    let mut out = Vec::with_capacity(steps + 1);
    out.push(dirichlet_energy(&y, &op.s_sym)?);
    for _ in 0..steps {
        y = op.p.matmul(&y)?;
        out.push(dirichlet_energy(&y, &op.s_sym)?);
    }
    Ok(out)
}

/// True when every step satisfies `E_{k+1} <= E_k + tol`.
pub fn is_non_increasing(energies: &[f64], tol: f64) -> bool {
    energies.windows(2).all(|w| w[1] <= w[0] + tol)
}
