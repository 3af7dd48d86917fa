//! Empirical latent-space attack by random directions on the ε-sphere.
//!
//! Query `j` for a sample is the `j`-th normalized Gaussian drawn from the
//! sample's `Attack` stream, so a run with more queries sees every query of a
//! shorter run first. The unperturbed point is always evaluated as a floor.
//! All queries sit at full radius ε: along any ray the linearized risk is
//! convex, so its maximum is on the sphere; for the true generator this is a
//! heuristic.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::data::LatentSet;
use crate::error::{check_len, Error, Result};
use crate::exec::Exec;
use crate::linalg::{dot, norm2, DenseMatrix};
use crate::losses::SensedModel;
use crate::network::DenseNet;
use crate::rng::{mix, stream, Purpose};
use crate::sensing::SamplingMatrix;

pub const DEFAULT_QUERIES: usize = 4096;
const CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    /// Best queried direction, scaled to norm ε.
    pub best_delta_z: Vec<f64>,
    /// `max(‖y − ΦG(z+Δz)‖²)` over the queries and `Δz = 0`.
    pub risk: f64,
    pub queries: usize,
    /// Exact worst case of the linearized residual, for comparison.
    pub linearized_value: f64,
}

/// Attack one latent code through a pre-built sensed model.
pub fn omni_attack_sensed(
    model: &SensedModel,
    z: &[f64],
    y: &[f64],
    eps: f64,
    n_queries: usize,
    seed: u64,
) -> Result<AttackResult> {
    let net = model.net();
    let k = net.input_dim();
    check_len("latent code", k, z.len())?;
    check_len("sensed target", net.output_dim(), y.len())?;
    if n_queries == 0 {
        return Err(Error::invalid("n_queries", "must be at least 1"));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::invalid("eps", format!("{eps} must be nonnegative")));
    }

    let lin = model.linearize(z, y)?;
    let floor = lin.fitting();
    let linearized_value = if eps > 0.0 { lin.solve(eps)?.value } else { floor };

    let mut rng = stream(seed, Purpose::Attack, 0);
    let mut best = (f64::NEG_INFINITY, vec![0.0; k]);
    let mut done = 0;
    while done < n_queries {
        let b = CHUNK.min(n_queries - done);
        let mut dirs = DenseMatrix::zeros(b, k);
        for i in 0..b {
            let row = dirs.row_mut(i);
            loop {
                row.iter_mut().for_each(|x| *x = StandardNormal.sample(&mut rng));
                let n = norm2(row);
                if n > 0.0 {
                    row.iter_mut().for_each(|x| *x *= eps / n);
                    break;
                }
            }
        }
        let mut points = dirs.clone();
        for i in 0..b {
            points.row_mut(i).iter_mut().zip(z).for_each(|(p, &zi)| *p += zi);
        }
        let out = net.output_batch(&points)?;
        for i in 0..b {
            let risk: f64 = out
                .row(i)
                .iter()
                .zip(y)
                .map(|(o, t)| (t - o) * (t - o))
                .sum();
            // Strict comparison keeps the lowest index on ties.
            if risk > best.0 {
                best = (risk, dirs.row(i).to_vec());
            }
        }
        done += b;
    }
    Ok(AttackResult {
        best_delta_z: best.1,
        risk: best.0.max(floor),
        queries: n_queries,
        linearized_value,
    })
}

/// Attack `net` at latent code `z` with sensed target `y`.
pub fn omni_attack(
    net: &DenseNet,
    phi: &SamplingMatrix,
    z: &[f64],
    y: &[f64],
    eps: f64,
    n_queries: usize,
    seed: u64,
) -> Result<AttackResult> {
    omni_attack_sensed(&SensedModel::new(net, phi)?, z, y, eps, n_queries, seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleEvaluation {
    pub index: usize,
    pub attack_risk: f64,
    pub fit_loss: f64,
    pub linearized_value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Mean attack risk.
    pub adv_risk: f64,
    pub fit_loss: f64,
    /// `adv_risk + fit_loss`
    pub total: f64,
    /// Mean linearized worst case.
    pub linearized_risk: f64,
    pub samples: Vec<SampleEvaluation>,
}

/// Per-sample attack seeds derive from `seed` and the sample index.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    mix(seed, index as u64)
}

/// Mean attack risk and fitting loss over a held-out set (`ys` holds the
/// sensed targets as rows).
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    net: &DenseNet,
    phi: &SamplingMatrix,
    latents: &LatentSet,
    ys: &DenseMatrix,
    eps: f64,
    n_queries: usize,
    seed: u64,
    exec: Exec,
) -> Result<Evaluation> {
    check_len("evaluation targets", latents.count(), ys.rows())?;
    let model = SensedModel::new(net, phi)?;
    let samples = exec.try_map(latents.count(), |i| {
        let r = omni_attack_sensed(
            &model,
            latents.code(i),
            ys.row(i),
            eps,
            n_queries,
            sample_seed(seed, i),
        )?;
        let res = model.residual(latents.code(i), ys.row(i))?;
        Ok::<_, Error>(SampleEvaluation {
            index: i,
            attack_risk: r.risk,
            fit_loss: dot(&res, &res),
            linearized_value: r.linearized_value,
        })
    })?;
    let n = samples.len() as f64;
    let mean = |f: fn(&SampleEvaluation) -> f64| samples.iter().map(f).sum::<f64>() / n;
    let adv_risk = mean(|s| s.attack_risk);
    let fit_loss = mean(|s| s.fit_loss);
    Ok(Evaluation {
        adv_risk,
        fit_loss,
        total: adv_risk + fit_loss,
        linearized_risk: mean(|s| s.linearized_value),
        samples,
    })
}

/// One row per sample: `index,attack_risk,fit_loss,linearized_value`.
pub fn samples_csv(samples: &[SampleEvaluation]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["index", "attack_risk", "fit_loss", "linearized_value"])?;
    for s in samples {
        w.write_record([
            s.index.to_string(),
            s.attack_risk.to_string(),
            s.fit_loss.to_string(),
            s.linearized_value.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))
}

pub fn write_samples_csv(path: &Path, samples: &[SampleEvaluation]) -> Result<()> {
    crate::fsio::write_atomic(path, &samples_csv(samples)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, DenseLayer};
    use crate::sensing::make_sampler;

    fn linear(seed: u64, n: usize, k: usize) -> DenseNet {
        let mut rng = stream(seed, Purpose::Data, 0);
        let w = DenseMatrix::from_fn(n, k, |_, _| StandardNormal.sample(&mut rng));
        DenseNet::new(vec![DenseLayer::new(w, vec![0.1; n], Activation::Identity).unwrap()]).unwrap()
    }

    #[test]
    fn constant_net_gives_unperturbed_residual() {
        let g = DenseNet::new(vec![DenseLayer::new(
            DenseMatrix::zeros(4, 2),
            vec![0.5; 4],
            Activation::Sigmoid,
        )
        .unwrap()])
        .unwrap();
        let phi = make_sampler(4, 0.5, 1).unwrap();
        let y = [1.0, 0.0];
        let r = omni_attack(&g, &phi, &[0.3, 0.1], &y, 2.0, 64, 3).unwrap();
        let fit = (1.0 - sigmoid_half()).powi(2) + sigmoid_half().powi(2);
        assert!((r.risk - fit).abs() < 1e-15);
        assert!((norm2(&r.best_delta_z) - 2.0).abs() < 1e-12);
    }

    fn sigmoid_half() -> f64 {
        crate::network::sigmoid(0.5)
    }

    #[test]
    fn deterministic_and_prefix_monotone() {
        let g = linear(2, 6, 3);
        let phi = make_sampler(6, 0.7, 2).unwrap();
        let z = [0.2, -0.1, 0.4];
        let y = [0.3, 0.3, 0.1, 0.9];
        let a = omni_attack(&g, &phi, &z, &y, 0.5, 1, 9).unwrap();
        assert_eq!(a, omni_attack(&g, &phi, &z, &y, 0.5, 1, 9).unwrap());
        let mut last = a.risk;
        for n in [10, 100, 600, 2000] {
            let r = omni_attack(&g, &phi, &z, &y, 0.5, n, 9).unwrap();
            assert!(r.risk >= last);
            last = r.risk;
        }
    }

    #[test]
    fn linear_generator_is_bounded_by_trust_region() {
        let g = linear(4, 8, 4);
        let phi = make_sampler(8, 0.75, 4).unwrap();
        let z = [0.1, 0.2, 0.3, 0.4];
        let y = [1.0, -1.0, 0.5, 0.0, 2.0, 1.0];
        let r = omni_attack(&g, &phi, &z, &y, 0.3, 5000, 1).unwrap();
        assert!(r.risk <= r.linearized_value * (1.0 + 1e-12));
        assert!(r.risk >= 0.95 * r.linearized_value);
    }

    #[test]
    fn zero_radius_evaluation() {
        let g = linear(5, 6, 2);
        let phi = make_sampler(6, 0.5, 5).unwrap();
        let z = LatentSet::new(DenseMatrix::from_rows(&[&[0.1, 0.2], &[0.5, -0.5]])).unwrap();
        let ys = DenseMatrix::from_fn(2, 3, |i, j| (i + j) as f64 * 0.1);
        let e = evaluate_model(&g, &phi, &z, &ys, 0.0, 16, 0, Exec::Sequential).unwrap();
        assert!((e.adv_risk - e.fit_loss).abs() < 1e-12);
        assert!((e.total - 2.0 * e.fit_loss).abs() < 1e-12);
        let csv = String::from_utf8(samples_csv(&e.samples).unwrap()).unwrap();
        assert!(csv.starts_with("index,attack_risk,fit_loss,linearized_value\n0,"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn bad_arguments() {
        let g = linear(1, 4, 2);
        let phi = make_sampler(4, 0.5, 1).unwrap();
        assert!(omni_attack(&g, &phi, &[0.0, 0.0], &[0.0, 0.0], 1.0, 0, 1).is_err());
        assert!(omni_attack(&g, &phi, &[0.0], &[0.0, 0.0], 1.0, 1, 1).is_err());
    }
}
