use super::Matrix;
use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;

/// Eigenvalues of a symmetric matrix, ascending, by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(sym: &Matrix) -> Result<Vec<f64>> {
    check_symmetric(sym)?;
    let n = sym.rows();
    let mut a = sym.clone();
    // Exact symmetrization so rotations operate on a truly symmetric array.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j) * a.get(i, j))
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    eig.sort_by(|x, y| x.total_cmp(y));
    Ok(eig)
}

/// Extremal eigenvalues `(lambda_min, lambda_max)` of a symmetric matrix.
pub fn spectral_range(sym: &Matrix) -> Result<(f64, f64)> {
    let eig = symmetric_eigenvalues(sym)?;
    match (eig.first(), eig.last()) {
        (Some(&lo), Some(&hi)) => Ok((lo, hi)),
        _ => Err(Error::Contract("spectral range of an empty matrix".into())),
    }
}

fn check_symmetric(m: &Matrix) -> Result<()> {
    if m.rows() != m.cols() {
        return Err(Error::Contract(format!(
            "expected a square symmetric matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let asym = m.max_asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::Contract(format!("matrix is not symmetric (max |a_ij - a_ji| = {asym:e})")));
    }
    Ok(())
}
