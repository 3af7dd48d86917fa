//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! Tall inputs are first reduced with a Householder QR so the rotations act
//! on the small `n x n` triangular factor. Column pairs are rotated until
//! every pair is orthogonal to working precision, which yields singular
//! values with high relative accuracy.

use super::{axpy, dot, norm2, DenseMatrix};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

#[derive(Clone, Debug)]
pub struct SvdResult {
    /// Left singular vectors, `rows x r` with orthonormal columns.
    pub u: DenseMatrix,
    /// Nonincreasing, nonnegative; `r = min(rows, cols)` entries.
    pub singulars: Vec<f64>,
    /// Right singular vectors, `cols x r` with orthonormal columns.
    pub v: DenseMatrix,
}

impl SvdResult {
    /// `U diag(s) Vᵀ`
    pub fn reconstruct(&self) -> DenseMatrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.singulars.iter().enumerate() {
                let x = us.get(i, j) * s;
                us.set(i, j, x);
            }
        }
        us.matmul_nt(&self.v).expect("svd factor shapes")
    }
}

/// Thin SVD of `a`. The first component of each right singular vector whose
/// magnitude exceeds 1e-12 is made nonnegative.
pub fn svd(a: &DenseMatrix) -> Result<SvdResult> {
    let (m, n) = (a.rows(), a.cols());
    if m == 0 || n == 0 {
        return Err(Error::invalid("matrix", format!("svd of an empty {m}x{n} matrix")));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("svd input"));
    }
    if m < n {
        let t = svd(&a.transpose())?;
        let mut out = SvdResult {
            u: t.v,
            singulars: t.singulars,
            v: t.u,
        };
        fix_signs(&mut out);
        return Ok(out);
    }

    let (q, r) = if m > n {
        let (q, r) = householder_qr(a);
        (Some(q), r)
    } else {
        (None, a.clone())
    };

    // Work on columns: store R column-major so rotations touch contiguous
    // memory.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| r.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let tol = f64::EPSILON * (n as f64);
    // Columns below this squared norm are numerically zero; rotating them
    // against each other only shuffles roundoff.
    let negligible = f64::EPSILON * f64::EPSILON * cols.iter().map(|c| dot(c, c)).sum::<f64>();
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0
                    || gamma.abs() <= tol * (alpha * beta).sqrt()
                    || alpha.min(beta) <= negligible
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence {
            rows: m,
            cols: n,
            sweeps: MAX_SWEEPS,
        });
    }

    let sigmas: Vec<f64> = cols
        .iter()
        .map(|c| if dot(c, c) <= negligible { 0.0 } else { norm2(c) })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigmas[j].total_cmp(&sigmas[i]).then(i.cmp(&j)));

    // Left vectors of the (square) Jacobi problem; zero columns are completed
    // to an orthonormal set afterwards.
    let mut ucols: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&j| {
            let s = sigmas[j];
            (s > 0.0).then(|| cols[j].iter().map(|x| x / s).collect())
        })
        .collect();
    complete_orthonormal(&mut ucols, n);
    let ucols: Vec<Vec<f64>> = ucols.into_iter().map(Option::unwrap).collect();

    let small_u = DenseMatrix::from_fn(n, n, |i, j| ucols[j][i]);
    let u = match q {
        Some(q) => q.matmul(&small_u)?,
        None => small_u,
    };
    let v = DenseMatrix::from_fn(n, n, |i, j| vcols[order[j]][i]);
    let singulars = order.iter().map(|&j| sigmas[j]).collect();

    let mut out = SvdResult { u, singulars, v };
    fix_signs(&mut out);
    Ok(out)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other slot.
fn complete_orthonormal(vecs: &mut [Option<Vec<f64>>], dim: usize) {
    let mut candidate = 0;
    for slot in 0..vecs.len() {
        if vecs[slot].is_some() {
            continue;
        }
        while candidate < dim {
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            // Two passes of Gram-Schmidt for stability.
            for _ in 0..2 {
                for other in vecs.iter().flatten() {
                    let d = dot(other, &e);
                    axpy(-d, other, &mut e);
                }
            }
            let nrm = norm2(&e);
            if nrm > 1e-8 {
                e.iter_mut().for_each(|x| *x /= nrm);
                vecs[slot] = Some(e);
                break;
            }
        }
    }
}

fn fix_signs(s: &mut SvdResult) {
    for j in 0..s.v.cols() {
        let lead = (0..s.v.rows())
            .map(|i| s.v.get(i, j))
            .find(|x| x.abs() > 1e-12);
        if matches!(lead, Some(x) if x < 0.0) {
            for i in 0..s.v.rows() {
                let x = s.v.get(i, j);
                s.v.set(i, j, -x);
            }
            for i in 0..s.u.rows() {
                let x = s.u.get(i, j);
                s.u.set(i, j, -x);
            }
        }
    }
}

/// Thin Householder QR of a tall matrix: `a = q r` with `q` (m x n) having
/// orthonormal columns and `r` (n x n) upper triangular.
fn householder_qr(a: &DenseMatrix) -> (DenseMatrix, DenseMatrix) {
    let (m, n) = (a.rows(), a.cols());
    // Column-major working copy.
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let x = &w[k][k..];
        let alpha = norm2(x);
        let mut v = x.to_vec();
        if alpha == 0.0 {
            reflectors.push(v);
            continue;
        }
        let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += sign * alpha;
        let vn = norm2(&v);
        v.iter_mut().for_each(|t| *t /= vn);
        for col in w.iter_mut().skip(k) {
            let d = 2.0 * dot(&v, &col[k..]);
            axpy(-d, &v, &mut col[k..]);
        }
        reflectors.push(v);
    }
    let r = DenseMatrix::from_fn(n, n, |i, j| if i <= j { w[j][i] } else { 0.0 });

    // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of I.
    let mut qcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            e
        })
        .collect();
    for k in (0..n).rev() {
        let v = &reflectors[k];
        if v.iter().all(|&t| t == 0.0) {
            continue;
        }
        for col in qcols.iter_mut() {
            let d = 2.0 * dot(v, &col[k..]);
            axpy(-d, v, &mut col[k..]);
        }
    }
    let q = DenseMatrix::from_fn(m, n, |i, j| qcols[j][i]);
    (q, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use rand_distr::{Distribution, StandardNormal};

    fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = stream(seed, Purpose::Data, 0);
        DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn orthonormality_error(m: &DenseMatrix) -> f64 {
        m.gram().max_abs_diff(&DenseMatrix::identity(m.cols()))
    }

    #[test]
    fn diagonal_matrix() {
        let s = svd(&DenseMatrix::diag(&[3.0, 1.0])).unwrap();
        assert_eq!(s.singulars, vec![3.0, 1.0]);
        assert!(s.u.max_abs_diff(&DenseMatrix::identity(2)) < 1e-15);
        assert!(s.v.max_abs_diff(&DenseMatrix::identity(2)) < 1e-15);
    }

    #[test]
    fn unsorted_diagonal_is_sorted() {
        let s = svd(&DenseMatrix::diag(&[1.0, -5.0, 2.0])).unwrap();
        assert_eq!(s.singulars, vec![5.0, 2.0, 1.0]);
        assert!(s.reconstruct().max_abs_diff(&DenseMatrix::diag(&[1.0, -5.0, 2.0])) < 1e-14);
    }

    #[test]
    fn zero_matrix_has_orthonormal_factors() {
        let s = svd(&DenseMatrix::zeros(2, 3)).unwrap();
        assert_eq!(s.singulars, vec![0.0, 0.0]);
        assert!(orthonormality_error(&s.u) < 1e-12);
        assert!(orthonormality_error(&s.v) < 1e-12);
    }

    #[test]
    fn rank_deficient_tall_matrix() {
        let col = [1.0, 2.0, 3.0, 4.0, 5.0];
        let a = DenseMatrix::from_fn(5, 3, |i, j| col[i] * (j as f64 + 1.0));
        let s = svd(&a).unwrap();
        assert!(s.singulars[1] < 1e-12 && s.singulars[2] < 1e-12);
        assert!(orthonormality_error(&s.u) < 1e-10);
        assert!(orthonormality_error(&s.v) < 1e-10);
        assert!(s.reconstruct().max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn random_shapes_meet_contract() {
        for (seed, (r, c)) in [(1, (4, 3)), (2, (3, 7)), (3, (40, 6)), (4, (6, 6)), (5, (1, 4))] {
            let a = random(r, c, seed + 10);
            let s = svd(&a).unwrap();
            assert_eq!(s.singulars.len(), r.min(c));
            assert!(s.singulars.windows(2).all(|w| w[0] >= w[1]));
            assert!(orthonormality_error(&s.u) <= 1e-10);
            assert!(orthonormality_error(&s.v) <= 1e-10);
            let err = s.reconstruct().max_abs_diff(&a);
            assert!(err <= 1e-8 * (1.0 + a.frobenius_norm()), "err {err}");
        }
    }

    #[test]
    fn sign_convention_makes_leading_component_nonnegative() {
        let a = random(5, 4, 99);
        let s = svd(&a).unwrap();
        for j in 0..4 {
            let lead = s.v.column(j).into_iter().find(|x| x.abs() > 1e-12).unwrap();
            assert!(lead > 0.0);
        }
        let t = svd(&a).unwrap();
        assert_eq!(s.u, t.u);
        assert_eq!(s.singulars, t.singulars);
    }

    #[test]
    fn qr_factors_are_consistent() {
        let a = random(9, 4, 3);
        let (q, r) = householder_qr(&a);
        assert!(orthonormality_error(&q) < 1e-13);
        assert!(q.matmul(&r).unwrap().max_abs_diff(&a) < 1e-13);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(svd(&DenseMatrix::zeros(0, 3)).is_err());
    }
}
