//! Inner maximization of the linearized adversarial risk.
//!
//! For a fixed latent code the worst perturbation solves
//!
//! ```text
//! max ‖ŷ − PΔz‖²   subject to   ‖Δz‖ ≤ ε
//! ```
//!
//! with `P = ΦJ_G(z)` and `ŷ = y − ΦG(z)`. The linearization is written here
//! as `G(z+Δz) ≈ G(z) + JΔz`; the opposite sign convention gives the same
//! optimal value since the ball is symmetric.
//!
//! A maximizer satisfies `(μI − PᵀP)Δz = −Pᵀŷ`, `μI − PᵀP ⪰ 0` and
//! `μ(ε − ‖Δz‖) = 0`. With `P = UΣVᵀ`, `c = Uᵀŷ` and `Λ = Σ²`,
//! `Δz = −V diag(σᵢ/(μ−Λᵢ)) c` where `μ > Λ_max` is the root of the secular
//! equation `Σ Λᵢcᵢ²/(μ−Λᵢ)² = ε²`, and the optimum is
//! `‖ŷ‖² − ‖c‖² + Σ cᵢ²μ²/(μ−Λᵢ)²`.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, Error, Result};
use crate::exec::Exec;
use crate::linalg::{axpy, dot, norm2, svd, DenseMatrix};
use crate::rng::{stream, Purpose};

/// Top-block coefficients at most this fraction of `‖ŷ‖` count as zero.
pub const HARD_CASE_TOL: f64 = 1e-10;
/// Eigenvalues within this relative distance share one secular pole.
const CLUSTER_TOL: f64 = 1e-10;
const ROOT_TOL: f64 = 1e-12;
const ROOT_MAX_ITER: usize = 500;

#[derive(Clone, Debug, PartialEq)]
pub struct TrustRegionSolution {
    pub delta_z: Vec<f64>,
    pub mu: f64,
    pub value: f64,
    /// `‖(μI − PᵀP)Δz + Pᵀŷ‖`
    pub kkt_stationarity: f64,
    /// `|‖Δz‖ − ε|` when `μ > 0`, else 0.
    pub kkt_norm_gap: f64,
    pub hard_case: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KktReport {
    pub stationarity: f64,
    /// `λ_min(μI − PᵀP) = μ − Λ_max`; must be nonnegative.
    pub min_eigenvalue: f64,
    /// `max(0, −min_eigenvalue)`
    pub psd_violation: f64,
    /// `|μ(ε − ‖Δz‖)|`
    pub complementarity: f64,
    /// `max(0, ‖Δz‖ − ε)`
    pub infeasibility: f64,
}

impl KktReport {
    pub fn worst(&self) -> f64 {
        self.stationarity
            .max(self.psd_violation)
            .max(self.complementarity)
            .max(self.infeasibility)
    }

    pub fn holds(&self, tol: f64) -> bool {
        self.worst() <= tol
    }
}

/// `P` with its SVD, reusable across right-hand sides and radii.
#[derive(Clone, Debug)]
pub struct InnerMaxProblem {
    p: DenseMatrix,
    u: DenseMatrix,
    v: DenseMatrix,
    /// `Λᵢ = σᵢ²` with near-equal values snapped to their cluster leader.
    lambdas: Vec<f64>,
}

impl InnerMaxProblem {
    pub fn new(p: &DenseMatrix) -> Result<Self> {
        let s = svd(p)?;
        let mut lambdas: Vec<f64> = s.singulars.iter().map(|x| x * x).collect();
        cluster(&mut lambdas);
        Ok(InnerMaxProblem {
            p: p.clone(),
            u: s.u,
            v: s.v,
            lambdas,
        })
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.p
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambdas[0]
    }

    /// `Uᵀŷ`
    pub fn coefficients(&self, y_hat: &[f64]) -> Result<Vec<f64>> {
        self.u.matvec_t(y_hat)
    }

    pub fn solve(&self, y_hat: &[f64], eps: f64) -> Result<TrustRegionSolution> {
        check_len("residual ŷ", self.p.rows(), y_hat.len())?;
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::invalid("eps", format!("{eps} must be positive and finite")));
        }
        if y_hat.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("residual ŷ"));
        }
        let k = self.p.cols();
        let y_sq = dot(y_hat, y_hat);
        let lmax = self.lambda_max();
        if lmax == 0.0 {
            return Ok(TrustRegionSolution {
                delta_z: vec![0.0; k],
                mu: 0.0,
                value: y_sq,
                kkt_stationarity: 0.0,
                kkt_norm_gap: 0.0,
                hard_case: false,
            });
        }

        let c = self.coefficients(y_hat)?;
        let top = self.lambdas.iter().take_while(|&&l| l == lmax).count();
        let threshold = HARD_CASE_TOL * y_sq.sqrt();
        let hard = c[..top].iter().all(|ci| ci.abs() <= threshold);

        // Coordinates of Δz in the basis of V's columns.
        let mut w = vec![0.0; self.lambdas.len()];
        let mu;
        if !hard {
            let t = secular_shift(&self.lambdas, &c, eps, lmax)?;
            mu = lmax + t;
            for (i, wi) in w.iter_mut().enumerate() {
                *wi = -self.lambdas[i].sqrt() * c[i] / ((lmax - self.lambdas[i]) + t);
            }
        } else {
            let rest = &self.lambdas[top..];
            let rest_c = &c[top..];
            let limit_sq: f64 = rest
                .iter()
                .zip(rest_c)
                .map(|(&l, &ci)| l * ci * ci / ((lmax - l) * (lmax - l)))
                .sum();
            if limit_sq < eps * eps {
                mu = lmax;
                for i in top..w.len() {
                    w[i] = -self.lambdas[i].sqrt() * c[i] / (lmax - self.lambdas[i]);
                }
                let pad = (eps * eps - limit_sq).max(0.0).sqrt();
                w[0] = if c[0] > 0.0 { -pad } else { pad };
            } else {
                let t = secular_shift(rest, rest_c, eps, lmax)?;
                mu = lmax + t;
                for i in top..w.len() {
                    w[i] = -self.lambdas[i].sqrt() * c[i] / ((lmax - self.lambdas[i]) + t);
                }
            }
        }

        let delta_z = self.v.matvec(&w)?;
        let value = self.value_from_coordinates(y_sq, &c, &w);
        let kkt = kkt_residuals(&self.p, y_hat, eps, &delta_z, mu, lmax)?;
        Ok(TrustRegionSolution {
            delta_z,
            mu,
            value,
            kkt_stationarity: kkt.stationarity,
            kkt_norm_gap: if mu > 0.0 { (norm2(&w) - eps).abs() } else { 0.0 },
            hard_case: hard && mu == lmax,
        })
    }

    /// `‖ŷ − PΔz‖²` for `Δz = Vw`, split into the part of `ŷ` outside
    /// `range(U)` and the per-direction residuals `cᵢ − σᵢwᵢ`.
    fn value_from_coordinates(&self, y_sq: f64, c: &[f64], w: &[f64]) -> f64 {
        let outside = (y_sq - dot(c, c)).max(0.0);
        let inside: f64 = c
            .iter()
            .zip(w)
            .zip(&self.lambdas)
            .map(|((&ci, &wi), &l)| {
                let r = ci - l.sqrt() * wi;
                r * r
            })
            .sum();
        outside + inside
    }

    /// Optimal value for a multiplier `μ > Λ_max`:
    /// `‖ŷ‖² − ‖c‖² + Σ cᵢ²μ²/(μ−Λᵢ)²`.
    pub fn closed_form_value(&self, y_hat: &[f64], mu: f64) -> Result<f64> {
        check_len("residual ŷ", self.p.rows(), y_hat.len())?;
        let lmax = self.lambda_max();
        if !(mu > lmax) {
            return Err(Error::MultiplierTooSmall {
                mu,
                lambda_max: lmax,
            });
        }
        let c = self.coefficients(y_hat)?;
        let y_sq = dot(y_hat, y_hat);
        let inside: f64 = c
            .iter()
            .zip(&self.lambdas)
            .map(|(&ci, &l)| {
                let r = ci * mu / (mu - l);
                r * r
            })
            .sum();
        Ok((y_sq - dot(&c, &c)).max(0.0) + inside)
    }
}

fn cluster(lambdas: &mut [f64]) {
    let Some(&lmax) = lambdas.first() else {
        return;
    };
    let tol = CLUSTER_TOL * lmax;
    let mut leader = lmax;
    for l in lambdas.iter_mut() {
        if leader - *l <= tol {
            *l = leader;
        } else {
            leader = *l;
        }
    }
}

/// Maximizes `‖ŷ − PΔz‖²` over `‖Δz‖ ≤ ε`.
pub fn solve_inner_max(p: &DenseMatrix, y_hat: &[f64], eps: f64) -> Result<TrustRegionSolution> {
    InnerMaxProblem::new(p)?.solve(y_hat, eps)
}

/// See [`InnerMaxProblem::closed_form_value`].
pub fn closed_form_value(p: &DenseMatrix, y_hat: &[f64], mu: f64) -> Result<f64> {
    InnerMaxProblem::new(p)?.closed_form_value(y_hat, mu)
}

/// Root `μ > λ_max` of `φ(μ) = Σ λᵢcᵢ²/(μ−λᵢ)² − ε²`.
///
/// `lambdas` must be nonincreasing and nonnegative. Returns
/// [`Error::HardCase`] when the coefficients on the top eigenvalue vanish,
/// since the root may then not exist to the right of `λ_max`.
pub fn secular_root(lambdas: &[f64], coeffs: &[f64], eps: f64) -> Result<f64> {
    check_len("secular coefficients", lambdas.len(), coeffs.len())?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid("eps", format!("{eps} must be positive and finite")));
    }
    if lambdas.is_empty() {
        return Err(Error::invalid("lambdas", "empty"));
    }
    if lambdas.windows(2).any(|w| w[0] < w[1]) || lambdas[lambdas.len() - 1] < 0.0 {
        return Err(Error::invalid("lambdas", "must be nonnegative and nonincreasing"));
    }
    let mut lam = lambdas.to_vec();
    cluster(&mut lam);
    let lmax = lam[0];
    let scale = norm2(coeffs);
    let top = lam.iter().take_while(|&&l| l == lmax).count();
    if lmax == 0.0 || coeffs[..top].iter().all(|c| c.abs() <= HARD_CASE_TOL * scale) {
        return Err(Error::HardCase);
    }
    Ok(lmax + secular_shift(&lam, coeffs, eps, lmax)?)
}

/// Root of the secular equation to the right of `floor`, where `φ(floor⁺)`
/// is either `+∞` (a pole) or nonnegative. Returned as the shift
/// `t = μ − floor`, which keeps full relative precision when the root sits
/// next to the pole.
fn secular_shift(lambdas: &[f64], coeffs: &[f64], eps: f64, floor: f64) -> Result<f64> {
    let eps_sq = eps * eps;
    // (floor − λᵢ, λᵢcᵢ²): the distance to each pole is gapᵢ + t.
    let terms: Vec<(f64, f64)> = lambdas
        .iter()
        .zip(coeffs)
        .map(|(&l, &c)| (floor - l, l * c * c))
        .filter(|&(_, a)| a > 0.0)
        .collect();
    let sum = |t: f64| -> f64 {
        terms
            .iter()
            .map(|&(g, a)| a / ((g + t) * (g + t)))
            .sum()
    };
    let phi = |t: f64| sum(t) - eps_sq;
    let accept = |f: f64| f.abs() <= ROOT_TOL * eps_sq;
    let not_found = |lo: f64, hi: f64| Error::RootNotFound {
        lo: floor + lo,
        hi: floor + hi,
        phi_lo: phi(lo),
        phi_hi: phi(hi),
    };

    // Bracket [lo, hi] with φ(lo) ≥ 0 > φ(hi), walking right from the pole.
    let delta = 1e-12 * (1.0 + floor);
    let mut lo = 0.0;
    let mut hi = delta;
    let mut phi_hi = phi(hi);
    let mut j = 0;
    while phi_hi >= 0.0 {
        if accept(phi_hi) {
            return Ok(hi);
        }
        lo = hi;
        j += 1;
        hi = delta * 2f64.powi(j);
        phi_hi = phi(hi);
        if j > 1100 || !hi.is_finite() {
            return Err(not_found(lo, hi));
        }
    }
    if accept(phi_hi) {
        return Ok(hi);
    }

    // Newton on ψ(t) = 1/√S(t) − 1/ε, which is nearly linear, safeguarded by
    // the bracket and falling back to bisection.
    let mut t = 0.5 * (lo + hi);
    for _ in 0..ROOT_MAX_ITER {
        let s = sum(t);
        let f = s - eps_sq;
        if accept(f) {
            return Ok(t);
        }
        if f > 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            return Ok(t);
        }
        let ds: f64 = terms
            .iter()
            .map(|&(g, a)| -2.0 * a / ((g + t) * (g + t) * (g + t)))
            .sum();
        let psi = 1.0 / s.sqrt() - 1.0 / eps;
        let dpsi = -0.5 * ds / (s * s.sqrt());
        let step = t - psi / dpsi;
        t = if step.is_finite() && step > lo && step < hi {
            step
        } else {
            0.5 * (lo + hi)
        };
    }
    Err(not_found(lo, hi))
}

fn kkt_residuals(
    p: &DenseMatrix,
    y_hat: &[f64],
    eps: f64,
    delta_z: &[f64],
    mu: f64,
    lambda_max: f64,
) -> Result<KktReport> {
    let pdz = p.matvec(delta_z)?;
    let mut r = p.matvec_t(&pdz)?;
    r.iter_mut().for_each(|x| *x = -*x);
    axpy(mu, delta_z, &mut r);
    axpy(1.0, &p.matvec_t(y_hat)?, &mut r);
    let nz = norm2(delta_z);
    let min_eigenvalue = mu - lambda_max;
    Ok(KktReport {
        stationarity: norm2(&r),
        min_eigenvalue,
        psd_violation: (-min_eigenvalue).max(0.0),
        complementarity: (mu * (eps - nz)).abs(),
        infeasibility: (nz - eps).max(0.0),
    })
}

/// Residuals of the optimality conditions for a candidate `(Δz, μ)`.
///
/// `λ_max(PᵀP)` is taken from an independent symmetric eigensolve of the Gram
/// matrix, not from the SVD used by the solver.
pub fn verify_kkt(
    p: &DenseMatrix,
    y_hat: &[f64],
    eps: f64,
    sol: &TrustRegionSolution,
) -> Result<KktReport> {
    check_len("residual ŷ", p.rows(), y_hat.len())?;
    check_len("perturbation Δz", p.cols(), sol.delta_z.len())?;
    let lambda_max = crate::linalg::eigmax_sym(&p.gram())?;
    kkt_residuals(p, y_hat, eps, &sol.delta_z, sol.mu, lambda_max)
}

/// Settings for the projected-gradient oracle.
#[derive(Clone, Copy, Debug)]
pub struct OracleSettings {
    pub step: f64,
    pub max_iters: usize,
    /// Stop a restart once an iteration moves `Δz` by at most `tol·ε`.
    pub tol: f64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        OracleSettings {
            step: 1e-2,
            max_iters: 100_000,
            tol: 1e-15,
        }
    }
}

/// Best value of `‖ŷ − PΔz‖²` found by projected gradient ascent from
/// `restarts` seeded points on the ε-sphere. Uses no factorization of `P`.
pub fn oracle_inner_max(
    p: &DenseMatrix,
    y_hat: &[f64],
    eps: f64,
    restarts: usize,
    seed: u64,
) -> Result<f64> {
    oracle_inner_max_with(p, y_hat, eps, restarts, seed, OracleSettings::default(), Exec::default())
}

pub fn oracle_inner_max_with(
    p: &DenseMatrix,
    y_hat: &[f64],
    eps: f64,
    restarts: usize,
    seed: u64,
    settings: OracleSettings,
    exec: Exec,
) -> Result<f64> {
    check_len("residual ŷ", p.rows(), y_hat.len())?;
    if restarts == 0 {
        return Err(Error::invalid("restarts", "must be at least 1"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("eps", format!("{eps} must be positive")));
    }
    let k = p.cols();
    let objective = |dz: &[f64]| -> f64 {
        let mut r = y_hat.to_vec();
        axpy(-1.0, &p.matvec(dz).expect("shape checked"), &mut r);
        dot(&r, &r)
    };
    let values = exec.map(restarts, |i| {
        let mut rng = stream(seed, Purpose::Oracle, i as u64);
        let mut dz: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = norm2(&dz);
        dz.iter_mut().for_each(|x| *x *= eps / n);
        for _ in 0..settings.max_iters {
            // ∇f = −2Pᵀ(ŷ − PΔz)
            let mut r = y_hat.to_vec();
            axpy(-1.0, &p.matvec(&dz).expect("shape checked"), &mut r);
            let g = p.matvec_t(&r).expect("shape checked");
            let mut next = dz.clone();
            axpy(-2.0 * settings.step, &g, &mut next);
            let n = norm2(&next);
            if n > eps {
                next.iter_mut().for_each(|x| *x *= eps / n);
            }
            let moved = next
                .iter()
                .zip(&dz)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dz = next;
            if moved <= settings.tol * eps {
                break;
            }
        }
        objective(&dz)
    });
    Ok(values.into_iter().fold(objective(&vec![0.0; k]), f64::max))
}
