//! Largest singular value by power iteration on `AᵀA`.

use rand_distr::{Distribution, StandardNormal};

use super::{axpy, dot, norm2, DenseMatrix};
use crate::rng::{stream, Purpose};

const ITERATION_CAP: usize = 10_000;
const START_SEED: u64 = 0x5EED_0F_C0FFEE;

#[derive(Clone, Debug)]
pub struct SpectralPair {
    pub sigma: f64,
    /// Unit left singular vector (length `rows`).
    pub u: Vec<f64>,
    /// Unit right singular vector (length `cols`).
    pub v: Vec<f64>,
    pub iterations: usize,
}

fn seeded_start(n: usize) -> Vec<f64> {
    let mut rng = stream(START_SEED, Purpose::Power, n as u64);
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let nrm = norm2(&v);
    v.into_iter().map(|x| x / nrm).collect()
}

fn unit(n: usize) -> Vec<f64> {
    let mut e = vec![0.0; n];
    if n > 0 {
        e[0] = 1.0;
    }
    e
}

/// Operator (spectral) norm of `a` with its top singular pair, within
/// relative `tol` of the largest singular value. Starts from a fixed seeded
/// vector so results are reproducible. A zero matrix returns 0 with
/// arbitrary unit vectors.
pub fn operator_norm(a: &DenseMatrix, tol: f64) -> SpectralPair {
    operator_norm_with(a, tol, &seeded_start(a.cols()), ITERATION_CAP)
}

/// Power iteration from `start`; stops when the eigen-residual
/// `‖AᵀAv − ρv‖ ≤ tol·ρ` or after `cap` iterations.
pub fn operator_norm_with(a: &DenseMatrix, tol: f64, start: &[f64], cap: usize) -> SpectralPair {
    assert!(tol > 0.0, "operator_norm tolerance must be positive");
    assert_eq!(start.len(), a.cols());
    let mut v = start.to_vec();
    let nrm = norm2(&v);
    if nrm == 0.0 {
        v = seeded_start(a.cols());
    } else {
        v.iter_mut().for_each(|x| *x /= nrm);
    }

    let mut iterations = 0;
    for it in 1..=cap.max(1) {
        iterations = it;
        let av = a.matvec(&v).expect("shape checked");
        let w = a.matvec_t(&av).expect("shape checked");
        let rho = dot(&v, &w);
        if rho <= 0.0 {
            return SpectralPair {
                sigma: 0.0,
                u: unit(a.rows()),
                v,
                iterations,
            };
        }
        let mut r = w.clone();
        axpy(-rho, &v, &mut r);
        let wn = norm2(&w);
        v = w.into_iter().map(|x| x / wn).collect();
        if norm2(&r) <= tol * rho {
            break;
        }
    }
    finish(a, v, iterations)
}

fn finish(a: &DenseMatrix, v: Vec<f64>, iterations: usize) -> SpectralPair {
    let av = a.matvec(&v).expect("shape checked");
    let sigma = norm2(&av);
    let u = if sigma > 0.0 {
        av.into_iter().map(|x| x / sigma).collect()
    } else {
        unit(a.rows())
    };
    SpectralPair {
        sigma,
        u,
        v,
        iterations,
    }
}

/// Top two singular values with the leading pair.
#[derive(Clone, Debug)]
pub struct TopPair {
    pub sigma1: f64,
    pub sigma2: f64,
    pub u1: Vec<f64>,
    pub v1: Vec<f64>,
}

impl TopPair {
    /// Whether the top singular value is separated from the next by more
    /// than `threshold`, i.e. whether `σ₁` is differentiable in practice.
    pub fn is_simple(&self, threshold: f64) -> bool {
        self.sigma1 - self.sigma2 > threshold
    }
}

/// Two-vector subspace iteration that remembers its block between calls.
///
/// During training the matrix changes a little per step, so restarting from
/// the previous block converges in a handful of iterations.
#[derive(Clone, Debug)]
pub struct SpectralTracker {
    block: Option<(Vec<f64>, Vec<f64>)>,
    cap: usize,
}

impl Default for SpectralTracker {
    fn default() -> Self {
        SpectralTracker {
            block: None,
            cap: ITERATION_CAP,
        }
    }
}

impl SpectralTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// At most `cap` iterations per call. The block persists, so a training
    /// loop keeps refining it across steps even when a single call stops
    /// short (e.g. while the top values are nearly tied).
    pub fn with_cap(cap: usize) -> Self {
        SpectralTracker {
            block: None,
            cap: cap.max(1),
        }
    }

    pub fn top_pair(&mut self, a: &DenseMatrix, tol: f64) -> TopPair {
        let n = a.cols();
        if n < 2 {
            let p = operator_norm(a, tol);
            return TopPair {
                sigma1: p.sigma,
                sigma2: 0.0,
                u1: p.u,
                v1: p.v,
            };
        }
        let (mut x1, mut x2) = match self.block.take() {
            Some(b) if b.0.len() == n => b,
            _ => {
                let x1 = seeded_start(n);
                let mut rng = stream(START_SEED, Purpose::Power, (n as u64) << 32);
                let x2: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                (x1, x2)
            }
        };
        orthonormalize(&mut x1, &mut x2);

        let apply = |x: &[f64]| {
            let ax = a.matvec(x).expect("shape checked");
            a.matvec_t(&ax).expect("shape checked")
        };

        let mut theta2 = 0.0;
        for _ in 0..self.cap {
            let y1 = apply(&x1);
            let y2 = apply(&x2);
            // Rayleigh-Ritz on span{x1, x2}.
            let (h11, h12, h22) = (dot(&x1, &y1), dot(&x1, &y2), dot(&x2, &y2));
            let (t1, t2, c, s) = eig2(h11, h12, h22);
            theta2 = t2;
            let r1: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| c * a + s * b).collect();
            let r2: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| -s * a + c * b).collect();
            let mut n1: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| c * a + s * b).collect();
            let mut n2: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| -s * a + c * b).collect();
            if t1 <= 0.0 {
                break;
            }
            let mut res1 = n1.clone();
            axpy(-t1, &r1, &mut res1);
            let mut res2 = n2.clone();
            axpy(-t2, &r2, &mut res2);
            // Both Ritz pairs must settle, otherwise a repeated top value
            // can stop the loop before the second vector reaches it.
            let done = norm2(&res1).max(norm2(&res2)) <= tol * t1;
            orthonormalize(&mut n1, &mut n2);
            x1 = n1;
            x2 = n2;
            if done {
                break;
            }
        }
        let pair = finish(a, x1.clone(), 0);
        self.block = Some((x1, x2));
        TopPair {
            sigma1: pair.sigma,
            sigma2: theta2.max(0.0).sqrt(),
            u1: pair.u,
            v1: pair.v,
        }
    }
}

/// Eigen-decomposition of the symmetric 2x2 `[[a, b], [b, d]]`: returns
/// `(λ₁ ≥ λ₂, c, s)` with `(c, s)` the unit eigenvector of `λ₁`.
fn eig2(a: f64, b: f64, d: f64) -> (f64, f64, f64, f64) {
    let mean = 0.5 * (a + d);
    let diff = 0.5 * (a - d);
    let rad = (diff * diff + b * b).sqrt();
    let l1 = mean + rad;
    let l2 = mean - rad;
    let (c, s) = if b == 0.0 {
        if a >= d {
            (1.0, 0.0)
        } else {
            (0.0, 1.0)
        }
    } else {
        let (x, y) = (b, l1 - a);
        let n = (x * x + y * y).sqrt();
        (x / n, y / n)
    };
    (l1, l2, c, s)
}

fn orthonormalize(x1: &mut [f64], x2: &mut [f64]) {
    let n1 = norm2(x1);
    if n1 > 0.0 {
        x1.iter_mut().for_each(|t| *t /= n1);
    }
    for _ in 0..2 {
        let d = dot(x1, x2);
        axpy(-d, x1, x2);
    }
    let n2 = norm2(x2);
    if n2 > 1e-300 {
        x2.iter_mut().for_each(|t| *t /= n2);
    } else {
        // Rank-one (or zero) image: any orthogonal direction will do.
        let k = (0..x1.len())
            .min_by(|&i, &j| x1[i].abs().total_cmp(&x1[j].abs()))
            .unwrap_or(0);
        x2.iter_mut().for_each(|t| *t = 0.0);
        x2[k] = 1.0;
        let d = dot(x1, x2);
        axpy(-d, x1, x2);
        let n2 = norm2(x2);
        x2.iter_mut().for_each(|t| *t /= n2);
    }
}
