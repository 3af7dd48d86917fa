//! Scalar objectives on a generator under a fixed sensing mask.
//!
//! Targets `y` always live in the sensed space (length `m`). Residuals are
//! `ŷ = y − ΦG(z)` and the linearized model is `P = ΦJ_G(z)`.

use crate::error::{check_len, Error, Result};
use crate::linalg::{axpy, dot, gemm, operator_norm, DenseMatrix, Op, SpectralTracker};
use crate::network::{DenseNet, NetGradients};
use crate::sensing::SamplingMatrix;
use crate::trustregion::{InnerMaxProblem, TrustRegionSolution};

/// Power-iteration tolerance for operator norms reported as losses.
pub const NORM_TOL: f64 = 1e-12;
/// Top singular values closer than this are treated as a crossing and the
/// operator-norm gradient is skipped.
pub const GAP_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub fitting: f64,
    pub adversarial: f64,
    pub lipschitz_penalty: f64,
    pub nullspace_penalty: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Table-style record: `total = adversarial + fitting`.
    pub fn table(fitting: f64, adversarial: f64, lipschitz_penalty: f64, nullspace_penalty: f64) -> Self {
        LossBreakdown {
            fitting,
            adversarial,
            lipschitz_penalty,
            nullspace_penalty,
            total: adversarial + fitting,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.fitting,
            self.adversarial,
            self.lipschitz_penalty,
            self.nullspace_penalty,
            self.total,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

/// A penalty value with its gradient with respect to one weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyTerm {
    pub value: f64,
    pub gradient: DenseMatrix,
    /// The gradient was zeroed because the top singular value is not simple.
    pub skipped: bool,
}

/// The generator composed with the row selection, `z ↦ ΦG(z)`.
///
/// Built once per (net, mask) so per-sample Jacobians are only `m x k`.
#[derive(Clone, Debug)]
pub struct SensedModel {
    net: DenseNet,
}

/// First-order model of the sensed residual at one latent code.
#[derive(Clone, Debug)]
pub struct Linearization {
    /// `ΦJ_G(z)`, `m x k`
    pub p: DenseMatrix,
    /// `y − ΦG(z)`
    pub y_hat: Vec<f64>,
}

impl Linearization {
    pub fn fitting(&self) -> f64 {
        dot(&self.y_hat, &self.y_hat)
    }

    pub fn solve(&self, eps: f64) -> Result<TrustRegionSolution> {
        InnerMaxProblem::new(&self.p)?.solve(&self.y_hat, eps)
    }
}

impl SensedModel {
    pub fn new(net: &DenseNet, phi: &SamplingMatrix) -> Result<Self> {
        check_len("mask ambient dimension", net.output_dim(), phi.ambient_dim())?;
        Ok(SensedModel {
            net: net.restrict_outputs(phi.selected()),
        })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn linearize(&self, z: &[f64], y: &[f64]) -> Result<Linearization> {
        check_len("sensed target", self.net.output_dim(), y.len())?;
        let trace = self.net.forward(z)?;
        let mut y_hat = y.to_vec();
        axpy(-1.0, trace.output(), &mut y_hat);
        Ok(Linearization {
            p: self.net.jacobian_from_trace(&trace),
            y_hat,
        })
    }

    pub fn residual(&self, z: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        check_len("sensed target", self.net.output_dim(), y.len())?;
        let mut r = y.to_vec();
        axpy(-1.0, &self.net.output(z)?, &mut r);
        Ok(r)
    }
}

fn check_targets(phi: &SamplingMatrix, y: &[f64]) -> Result<()> {
    check_len("sensed target", phi.sensed_dim(), y.len())
}

/// `‖y − ΦG(z)‖²` and its parameter gradients.
pub fn fitting_loss(
    net: &DenseNet,
    phi: &SamplingMatrix,
    z: &[f64],
    y: &[f64],
) -> Result<(f64, NetGradients)> {
    check_len("mask ambient dimension", net.output_dim(), phi.ambient_dim())?;
    check_targets(phi, y)?;
    let trace = net.forward(z)?;
    let mut y_hat = y.to_vec();
    axpy(-1.0, &phi.apply(trace.output())?, &mut y_hat);
    let mut upstream = phi.scatter(&y_hat)?;
    upstream.iter_mut().for_each(|u| *u *= -2.0);
    let grads = net.param_gradients(&trace, &upstream)?;
    Ok((dot(&y_hat, &y_hat), grads))
}

/// Sum of sensed squared residuals over a batch (`zs` is `B x k`, `ys` is
/// `B x m`) with the summed parameter gradients.
pub fn fitting_loss_batch(
    net: &DenseNet,
    phi: &SamplingMatrix,
    zs: &DenseMatrix,
    ys: &DenseMatrix,
) -> Result<(f64, NetGradients)> {
    check_len("mask ambient dimension", net.output_dim(), phi.ambient_dim())?;
    check_len("target batch width", phi.sensed_dim(), ys.cols())?;
    check_len("target batch size", zs.rows(), ys.rows())?;
    let trace = net.forward_batch(zs)?;
    let out = trace.output();
    let mut upstream = DenseMatrix::zeros(out.rows(), out.cols());
    let mut total = 0.0;
    for b in 0..out.rows() {
        let (o, t) = (out.row(b), ys.row(b));
        let up = upstream.row_mut(b);
        for (r, &i) in phi.selected().iter().enumerate() {
            let res = t[r] - o[i];
            total += res * res;
            up[i] = -2.0 * res;
        }
    }
    let (grads, _) = net.backward_batch(&trace, &upstream)?;
    Ok((total, grads))
}

/// Exact worst case of the linearized residual over the ε-ball.
pub fn exact_adv_risk(
    net: &DenseNet,
    phi: &SamplingMatrix,
    z: &[f64],
    y: &[f64],
    eps: f64,
) -> Result<f64> {
    Ok(SensedModel::new(net, phi)?.linearize(z, y)?.solve(eps)?.value)
}

/// `2‖ŷ‖² + 2‖P‖²_op ε²`, an upper bound on [`exact_adv_risk`].
pub fn surrogate_bound(
    net: &DenseNet,
    phi: &SamplingMatrix,
    z: &[f64],
    y: &[f64],
    eps: f64,
) -> Result<f64> {
    let lin = SensedModel::new(net, phi)?.linearize(z, y)?;
    Ok(bound_from_linearization(&lin, eps))
}

pub fn bound_from_linearization(lin: &Linearization, eps: f64) -> f64 {
    let s = operator_norm(&lin.p, NORM_TOL).sigma;
    2.0 * lin.fitting() + 2.0 * s * s * eps * eps
}

/// `‖I − WᵀW‖²_F` with gradient `−4W(I − WᵀW)`.
pub fn lipschitz_penalty(w: &DenseMatrix) -> PenaltyTerm {
    let mut defect = w.gram();
    defect.scale(-1.0);
    for i in 0..defect.rows() {
        let d = defect.get(i, i) + 1.0;
        defect.set(i, i, d);
    }
    let value = dot(defect.as_slice(), defect.as_slice());
    let mut gradient = gemm(w, Op::N, &defect, Op::N);
    gradient.scale(-4.0);
    PenaltyTerm {
        value,
        gradient,
        skipped: false,
    }
}

/// `σ₁(ΦW)²` for the last-layer weights `W` (`n x h`), with gradient
/// `2σ₁·scatter(u₁)v₁ᵀ`.
pub fn nullspace_penalty(phi: &SamplingMatrix, w_last: &DenseMatrix) -> Result<PenaltyTerm> {
    nullspace_penalty_tracked(phi, w_last, &mut SpectralTracker::new(), NORM_TOL)
}

/// [`nullspace_penalty`] with a warm-started spectral estimate, for use
/// inside training loops where `W` moves slowly.
pub fn nullspace_penalty_tracked(
    phi: &SamplingMatrix,
    w_last: &DenseMatrix,
    tracker: &mut SpectralTracker,
    tol: f64,
) -> Result<PenaltyTerm> {
    check_len("last-layer rows", phi.ambient_dim(), w_last.rows())?;
    let a = phi.compose(w_last)?;
    let top = tracker.top_pair(&a, tol);
    let value = top.sigma1 * top.sigma1;
    let mut gradient = DenseMatrix::zeros(w_last.rows(), w_last.cols());
    let skipped = !top.is_simple(GAP_TOL);
    if !skipped {
        for (r, &i) in phi.selected().iter().enumerate() {
            let s = 2.0 * top.sigma1 * top.u1[r];
            for (g, &v) in gradient.row_mut(i).iter_mut().zip(&top.v1) {
                *g = s * v;
            }
        }
    }
    Ok(PenaltyTerm {
        value,
        gradient,
        skipped,
    })
}

/// Knobs of the surrogate objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateWeights {
    pub lambda: f64,
    pub eps: f64,
    pub lipschitz_weight: f64,
    pub nullspace_weight: f64,
}

impl SurrogateWeights {
    /// Penalty weights `ε²`, matching the `ε²` factor on `‖ΦJ‖²_op`.
    pub fn new(lambda: f64, eps: f64) -> Self {
        SurrogateWeights {
            lambda,
            eps,
            lipschitz_weight: eps * eps,
            nullspace_weight: eps * eps,
        }
    }

    pub fn fit_weight(&self) -> f64 {
        0.5 * (self.lambda + 1.0)
    }
}

#[derive(Clone, Debug)]
pub struct SurrogateLoss {
    /// `Σᵢ ε²‖ΦJ_G(zᵢ)‖²_op + ((λ+1)/2)‖yᵢ − ΦG(zᵢ)‖²`, monitored.
    pub value: f64,
    /// `((λ+1)/2)Σᵢ fitᵢ + B·(w_lip Σ_{l<H} ‖I−W_lᵀW_l‖²_F + w_null σ₁(ΦW_H)²)`,
    /// the objective whose gradient is returned.
    pub objective: f64,
    pub fitting: f64,
    pub jacobian_norm_sq: f64,
    pub lipschitz_penalty: f64,
    pub nullspace_penalty: f64,
    pub gradients: NetGradients,
    pub nullspace_skipped: bool,
}

/// Surrogate objective over a batch. The `‖ΦJ‖²_op` term is evaluated
/// exactly for monitoring; its gradient is taken through the layer-wise
/// penalties, which are scaled by the batch size so they weigh like the
/// per-sample sum they stand in for.
pub fn surrogate_training_loss(
    net: &DenseNet,
    phi: &SamplingMatrix,
    zs: &DenseMatrix,
    ys: &DenseMatrix,
    weights: SurrogateWeights,
) -> Result<SurrogateLoss> {
    if zs.rows() == 0 {
        return Err(Error::invalid("batch", "is empty"));
    }
    if !(weights.lambda >= 0.0) || !(weights.eps >= 0.0) {
        return Err(Error::invalid("surrogate weights", format!("{weights:?}")));
    }
    let batch = zs.rows() as f64;
    let (fitting, mut gradients) = fitting_loss_batch(net, phi, zs, ys)?;
    gradients.scale(weights.fit_weight());

    let model = SensedModel::new(net, phi)?;
    let mut jacobian_norm_sq = 0.0;
    for b in 0..zs.rows() {
        let trace = model.net().forward(zs.row(b))?;
        let s = operator_norm(&model.net().jacobian_from_trace(&trace), NORM_TOL).sigma;
        jacobian_norm_sq += s * s;
    }

    let h = net.depth();
    let mut lipschitz = 0.0;
    for (l, layer) in net.layers()[..h - 1].iter().enumerate() {
        let term = lipschitz_penalty(&layer.weights);
        lipschitz += term.value;
        gradients.0[l]
            .weights
            .add_scaled(batch * weights.lipschitz_weight, &term.gradient);
    }
    let null = nullspace_penalty(phi, &net.layers()[h - 1].weights)?;
    gradients.0[h - 1]
        .weights
        .add_scaled(batch * weights.nullspace_weight, &null.gradient);

    let eps_sq = weights.eps * weights.eps;
    Ok(SurrogateLoss {
        value: eps_sq * jacobian_norm_sq + weights.fit_weight() * fitting,
        objective: weights.fit_weight() * fitting
            + batch * (weights.lipschitz_weight * lipschitz + weights.nullspace_weight * null.value),
        fitting,
        jacobian_norm_sq,
        lipschitz_penalty: lipschitz,
        nullspace_penalty: null.value,
        gradients,
        nullspace_skipped: null.skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::svd;
    use crate::network::{Activation, DenseLayer};
    use crate::rng::{stream, Purpose};
    use crate::sensing::make_sampler;
    use rand::Rng;

    fn net(seed: u64) -> DenseNet {
        let mut n = DenseNet::seeded(&[3, 6, 8], &[Activation::Tanh, Activation::Sigmoid], seed).unwrap();
        let mut rng = stream(seed, Purpose::Data, 3);
        for l in n.layers_mut() {
            l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
        }
        n
    }

    fn targets(m: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, Purpose::Data, 4);
        (0..m).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn fitting_zero_at_exact_targets() {
        let g = net(1);
        let phi = make_sampler(8, 0.5, 2).unwrap();
        let z = [0.1, 0.2, 0.3];
        let y = phi.apply(&g.output(&z).unwrap()).unwrap();
        let (loss, grads) = fitting_loss(&g, &phi, &z, &y).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn zero_net_fitting_is_target_energy() {
        let w = DenseMatrix::zeros(4, 2);
        let g = DenseNet::new(vec![DenseLayer::new(w, vec![0.0; 4], Activation::Identity).unwrap()]).unwrap();
        let phi = make_sampler(4, 0.5, 1).unwrap();
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = phi.apply(&x).unwrap();
        let (loss, _) = fitting_loss(&g, &phi, &[0.5, 0.5], &y).unwrap();
        assert_eq!(loss, dot(&y, &y));
        // Constant net: no Jacobian, so the adversary gains nothing.
        assert_eq!(exact_adv_risk(&g, &phi, &[0.5, 0.5], &y, 3.0).unwrap(), loss);
    }

    #[test]
    fn fitting_gradient_matches_finite_differences() {
        let g = net(4);
        let phi = make_sampler(8, 0.75, 5).unwrap();
        let z = [0.4, -0.6, 0.2];
        let y = targets(phi.sensed_dim(), 6);
        let (_, grads) = fitting_loss(&g, &phi, &z, &y).unwrap();
        let h = 1e-6;
        for l in 0..g.depth() {
            for i in 0..g.layers()[l].out_dim() {
                for j in 0..g.layers()[l].in_dim() {
                    let mut p = g.clone();
                    let w = p.layers()[l].weights.get(i, j);
                    p.layers_mut()[l].weights.set(i, j, w + h);
                    let fp = fitting_loss(&p, &phi, &z, &y).unwrap().0;
                    p.layers_mut()[l].weights.set(i, j, w - h);
                    let fm = fitting_loss(&p, &phi, &z, &y).unwrap().0;
                    assert!(((fp - fm) / (2.0 * h) - grads.0[l].weights.get(i, j)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn batch_fitting_sums_samples() {
        let g = net(7);
        let phi = make_sampler(8, 0.5, 7).unwrap();
        let zs = DenseMatrix::from_rows(&[&[0.1, 0.2, 0.3], &[-0.5, 0.0, 0.9]]);
        let ys = DenseMatrix::from_fn(2, phi.sensed_dim(), |i, j| 0.1 * (i + j) as f64);
        let (total, grads) = fitting_loss_batch(&g, &phi, &zs, &ys).unwrap();
        let (a, ga) = fitting_loss(&g, &phi, zs.row(0), ys.row(0)).unwrap();
        let (b, gb) = fitting_loss(&g, &phi, zs.row(1), ys.row(1)).unwrap();
        assert!((total - a - b).abs() < 1e-13);
        let mut diff = ga;
        diff.add_scaled(1.0, &gb);
        diff.add_scaled(-1.0, &grads);
        assert!(diff.max_abs() < 1e-13);
    }

    #[test]
    fn sandwich_on_random_instances() {
        for seed in 0..30 {
            let g = net(seed);
            let phi = make_sampler(8, 0.75, seed).unwrap();
            let z = [0.3, -0.1, 0.7];
            let y = targets(phi.sensed_dim(), seed);
            let eps = 0.5 + seed as f64 * 0.1;
            let (fit, _) = fitting_loss(&g, &phi, &z, &y).unwrap();
            let adv = exact_adv_risk(&g, &phi, &z, &y, eps).unwrap();
            let bound = surrogate_bound(&g, &phi, &z, &y, eps).unwrap();
            assert!(fit <= adv + 1e-12 && adv <= bound + 1e-12, "{fit} {adv} {bound}");
            let small = exact_adv_risk(&g, &phi, &z, &y, 1e-12).unwrap();
            assert!((small - fit).abs() < 1e-9);
        }
    }

    #[test]
    fn bound_plug_in() {
        let lin = Linearization {
            p: DenseMatrix::identity(2),
            y_hat: vec![0.0, 0.0],
        };
        assert!((bound_from_linearization(&lin, 1.0) - 2.0).abs() < 1e-12);
        let lin = Linearization {
            p: DenseMatrix::zeros(2, 2),
            y_hat: vec![1.0, 2.0],
        };
        assert_eq!(bound_from_linearization(&lin, 1.0), 10.0);
    }

    #[test]
    fn lipschitz_examples() {
        let q = DenseMatrix::from_rows(&[&[0.6, -0.8], &[0.8, 0.6]]);
        assert!(lipschitz_penalty(&q).value < 1e-15);
        let t = lipschitz_penalty(&DenseMatrix::diag(&[2.0, 2.0]));
        assert_eq!(t.value, 18.0);
        assert_eq!(t.gradient, DenseMatrix::diag(&[24.0, 24.0]));
    }

    #[test]
    fn lipschitz_gradient_matches_finite_differences() {
        let mut rng = stream(3, Purpose::Data, 0);
        let w = DenseMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let t = lipschitz_penalty(&w);
        let h = 1e-6;
        for i in 0..5 {
            for j in 0..3 {
                let mut p = w.clone();
                p.set(i, j, w.get(i, j) + h);
                let fp = lipschitz_penalty(&p).value;
                p.set(i, j, w.get(i, j) - h);
                let fm = lipschitz_penalty(&p).value;
                assert!(((fp - fm) / (2.0 * h) - t.gradient.get(i, j)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn nullspace_examples() {
        let phi = make_sampler(6, 0.5, 11).unwrap();
        let unselected: Vec<usize> = (0..6).filter(|i| !phi.selected().contains(i)).collect();
        let w = DenseMatrix::from_fn(6, 2, |i, j| if i == unselected[j] { 1.0 } else { 0.0 });
        assert_eq!(nullspace_penalty(&phi, &w).unwrap().value, 0.0);
        let full = make_sampler(3, 1.0, 1).unwrap();
        let t = nullspace_penalty(&full, &DenseMatrix::identity(3)).unwrap();
        assert!((t.value - 1.0).abs() < 1e-12);
        assert!(t.skipped);
        assert!(nullspace_penalty(&full, &DenseMatrix::identity(4)).is_err());
    }

    #[test]
    fn nullspace_gradient_matches_finite_differences() {
        let phi = make_sampler(7, 0.6, 3).unwrap();
        let mut rng = stream(9, Purpose::Data, 0);
        let w = DenseMatrix::from_fn(7, 4, |_, _| rng.random_range(-1.0..1.0));
        let exact = |m: &DenseMatrix| svd(&phi.compose(m).unwrap()).unwrap().singulars[0].powi(2);
        let t = nullspace_penalty(&phi, &w).unwrap();
        assert!(!t.skipped);
        assert!((t.value - exact(&w)).abs() < 1e-10);
        let h = 1e-6;
        for i in 0..7 {
            for j in 0..4 {
                let mut p = w.clone();
                p.set(i, j, w.get(i, j) + h);
                let fp = exact(&p);
                p.set(i, j, w.get(i, j) - h);
                let fm = exact(&p);
                assert!(((fp - fm) / (2.0 * h) - t.gradient.get(i, j)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn surrogate_decomposes_per_sample() {
        let g = net(12);
        let phi = make_sampler(8, 0.75, 1).unwrap();
        let zs = DenseMatrix::from_rows(&[&[0.2, 0.1, -0.4], &[0.9, -0.3, 0.0]]);
        let ys = DenseMatrix::from_fn(2, phi.sensed_dim(), |i, j| 0.5 + 0.05 * (i as f64 - j as f64));
        let w = SurrogateWeights::new(3.0, 0.4);
        let s = surrogate_training_loss(&g, &phi, &zs, &ys, w).unwrap();
        let mut expect = 0.0;
        for b in 0..2 {
            let lin = SensedModel::new(&g, &phi).unwrap().linearize(zs.row(b), ys.row(b)).unwrap();
            let sigma = svd(&lin.p).unwrap().singulars[0];
            expect += 0.16 * sigma * sigma + 2.0 * lin.fitting();
        }
        assert!((s.value - expect).abs() <= 1e-10 * expect);

        let zero = surrogate_training_loss(&g, &phi, &zs, &ys, SurrogateWeights::new(3.0, 0.0)).unwrap();
        assert!((zero.value - 2.0 * zero.fitting).abs() < 1e-12);
        assert!(surrogate_training_loss(&g, &phi, &DenseMatrix::zeros(0, 3), &ys, w).is_err());
    }

    #[test]
    fn surrogate_gradient_matches_objective() {
        let g = net(13);
        let phi = make_sampler(8, 0.5, 2).unwrap();
        let zs = DenseMatrix::from_rows(&[&[0.3, 0.3, -0.2]]);
        let ys = DenseMatrix::from_fn(1, phi.sensed_dim(), |_, j| 0.2 * j as f64);
        let w = SurrogateWeights::new(1.0, 0.5);
        let s = surrogate_training_loss(&g, &phi, &zs, &ys, w).unwrap();
        assert!(!s.nullspace_skipped);
        let h = 1e-6;
        for l in 0..g.depth() {
            let (i, j) = (1, 2);
            let mut p = g.clone();
            let x = p.layers()[l].weights.get(i, j);
            p.layers_mut()[l].weights.set(i, j, x + h);
            let fp = surrogate_training_loss(&p, &phi, &zs, &ys, w).unwrap().objective;
            p.layers_mut()[l].weights.set(i, j, x - h);
            let fm = surrogate_training_loss(&p, &phi, &zs, &ys, w).unwrap().objective;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - s.gradients.0[l].weights.get(i, j)).abs() < 1e-5 * (1.0 + fd.abs()));
        }
    }
}
