use super::DenseMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    /// Nonincreasing.
    pub values: Vec<f64>,
    /// Column `j` is the eigenvector of `values[j]`.
    pub vectors: DenseMatrix,
}

fn check_symmetric(s: &DenseMatrix) -> Result<()> {
    if s.rows() != s.cols() {
        return Err(Error::DimensionMismatch {
            context: "symmetric matrix columns",
            expected: s.rows(),
            actual: s.cols(),
        });
    }
    let scale = 1.0 + s.max_abs();
    let mut worst = 0.0f64;
    for i in 0..s.rows() {
        for j in i + 1..s.cols() {
            worst = worst.max((s.get(i, j) - s.get(j, i)).abs());
        }
    }
    if worst > 1e-10 * scale {
        return Err(Error::NotSymmetric(worst));
    }
    Ok(())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn symmetric_eigen(s: &DenseMatrix) -> Result<SymmetricEigen> {
    check_symmetric(s)?;
    let n = s.rows();
    // Symmetrize so tiny asymmetries do not leak into the rotations.
    let mut a = DenseMatrix::from_fn(n, n, |i, j| 0.5 * (s.get(i, j) + s.get(j, i)));
    let mut v = DenseMatrix::identity(n);

    const MAX_SWEEPS: usize = 100;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum();
        let diag: f64 = (0..n).map(|i| a.get(i, i).powi(2)).sum();
        // Roundoff left by a rotation is about eps * |A| per entry.
        let tol = f64::EPSILON * n as f64;
        if off <= tol * tol * (diag + off) || off == 0.0 {
            return Ok(sorted(a, v));
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let (akp, akq) = (a.get(k, p), a.get(k, q));
                    a.set(k, p, c * akp - sn * akq);
                    a.set(k, q, sn * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (a.get(p, k), a.get(q, k));
                    a.set(p, k, c * apk - sn * aqk);
                    a.set(q, k, sn * apk + c * aqk);
                }
                // The rotation annihilates (p, q) exactly in exact arithmetic.
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - sn * vkq);
                    v.set(k, q, sn * vkp + c * vkq);
                }
            }
        }
    }
    Err(Error::SvdNoConvergence {
        rows: n,
        cols: n,
        sweeps: MAX_SWEEPS,
    })
}

fn sorted(a: DenseMatrix, v: DenseMatrix) -> SymmetricEigen {
    let n = a.rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)).then(i.cmp(&j)));
    SymmetricEigen {
        values: order.iter().map(|&i| a.get(i, i)).collect(),
        vectors: DenseMatrix::from_fn(n, n, |i, j| v.get(i, order[j])),
    }
}

/// Largest eigenvalue of a symmetric matrix.
pub fn eigmax_sym(s: &DenseMatrix) -> Result<f64> {
    let e = symmetric_eigen(s)?;
    Ok(e.values.first().copied().unwrap_or(0.0))
}
