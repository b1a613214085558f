//! Small dense linear algebra on square matrices: Cholesky-based inversion,
//! the matrix exponential, and a Jacobi eigensolver for symmetric matrices.
//! Sizes here are tiny (covariances over a few dozen to a few hundred
//! blocks), so simplicity and determinism win over asymptotics.

use super::Tensor;
use crate::error::{Result, SnapError};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let n = square_dim(a, "cholesky")?;
    let mut l = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.at2(i, j);
            for k in 0..j {
                sum -= l.at2(i, k) * l.at2(j, k);
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(SnapError::Singular(format!(
                        "cholesky pivot {sum:.3e} at index {i}"
                    )));
                }
                l.set2(i, j, sum.sqrt());
            } else {
                l.set2(i, j, sum / l.at2(j, j));
            }
        }
    }
    Ok(l)
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
/// Errors on non-PD input instead of returning garbage.
pub fn cholesky_inverse(a: &Tensor) -> Result<Tensor> {
    let n = square_dim(a, "cholesky_inverse")?;
    let l = cholesky(a)?;
    // Solve L Lᵀ X = I column by column.
    let mut inv = Tensor::zeros(&[n, n]);
    let mut y = vec![0.0; n];
    for col in 0..n {
        // Forward: L y = e_col
        for i in 0..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l.at2(i, k) * y[k];
            }
            y[i] = s / l.at2(i, i);
        }
        // Backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l.at2(k, i) * inv.at2(k, col);
            }
            inv.set2(i, col, s / l.at2(i, i));
        }
    }
    // Symmetrize to scrub round-off asymmetry.
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (inv.at2(i, j) + inv.at2(j, i));
            inv.set2(i, j, v);
            inv.set2(j, i, v);
        }
    }
    Ok(inv)
}

/// Matrix exponential by scaling-and-squaring: halve until the 1-norm is
/// below 0.5, run the Taylor series to convergence, then square back up.
pub fn matrix_exp(a: &Tensor) -> Result<Tensor> {
    let n = square_dim(a, "matrix_exp")?;
    let norm = one_norm(a);
    let mut squarings = 0u32;
    let mut scaled = a.clone();
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil() as u32;
        scaled = a.scale(0.5f64.powi(squarings as i32));
    }

    let mut result = identity(n);
    let mut term = identity(n);
    for k in 1..200 {
        term = term.matmul(&scaled)?.scale(1.0 / k as f64);
        result.add_assign(&term);
        if one_norm(&term) < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        result = result.matmul(&result)?;
    }
    Ok(result)
}

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// columns of the second tensor.
pub fn sym_eigen(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let n = square_dim(a, "sym_eigen")?;
    // Work on the symmetrized copy so tiny asymmetries can't stall rotation.
    let mut m = a.clone();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m.at2(i, j) + m.at2(j, i));
            m.set2(i, j, v);
            m.set2(j, i, v);
        }
    }
    let mut v = identity(n);
    let fro = m.frobenius_norm().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m.at2(i, j) * m.at2(i, j);
            }
        }
        if off.sqrt() < 1e-13 * fro {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.at2(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m.at2(p, p);
                let aqq = m.at2(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // Rotate rows/cols p and q of m, and columns of v.
                for k in 0..n {
                    let mkp = m.at2(k, p);
                    let mkq = m.at2(k, q);
                    m.set2(k, p, c * mkp - s * mkq);
                    m.set2(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.at2(p, k);
                    let mqk = m.at2(q, k);
                    m.set2(p, k, c * mpk - s * mqk);
                    m.set2(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.at2(k, p);
                    let vkq = v.at2(k, q);
                    v.set2(k, p, c * vkp - s * vkq);
                    v.set2(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let evals: Vec<f64> = (0..n).map(|i| m.at2(i, i)).collect();
    order.sort_by(|&a, &b| evals[b].partial_cmp(&evals[a]).unwrap());
    let sorted_vals: Vec<f64> = order.iter().map(|&i| evals[i]).collect();
    let mut sorted_vecs = Tensor::zeros(&[n, n]);
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            sorted_vecs.set2(k, new_col, v.at2(k, old_col));
        }
    }
    Ok((sorted_vals, sorted_vecs))
}

/// Principal logarithm of a symmetric positive-definite matrix.
pub fn matrix_log_spd(s: &Tensor) -> Result<Tensor> {
    let n = square_dim(s, "matrix_log_spd")?;
    let (vals, vecs) = sym_eigen(s)?;
    if let Some(min) = vals.last() {
        if *min <= 0.0 {
            return Err(SnapError::Singular(format!(
                "matrix log requires positive eigenvalues, found {min:.3e}"
            )));
        }
    }
    let mut log_diag = Tensor::zeros(&[n, n]);
    for (i, &lambda) in vals.iter().enumerate() {
        log_diag.set2(i, i, lambda.ln());
    }
    vecs.matmul(&log_diag)?.matmul_nt(&vecs)
}

pub fn identity(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.set2(i, i, 1.0);
    }
    t
}

fn one_norm(a: &Tensor) -> f64 {
    let (m, n) = (a.rows(), a.cols());
    (0..n)
        .map(|j| (0..m).map(|i| a.at2(i, j).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn square_dim(a: &Tensor, op: &'static str) -> Result<usize> {
    if a.shape().len() != 2 || a.rows() != a.cols() {
        return Err(SnapError::shape(op, format!("expected square matrix, got {:?}", a.shape())));
    }
    Ok(a.rows())
}
