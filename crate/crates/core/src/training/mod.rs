//! Autoencoder pretraining, DCS / DCSAT fine-tuning, radius calibration and
//! the surrogate-tightness experiment.
//!
//! Fine-tuning minimizes, per mini-batch of size `B`,
//!
//! ```text
//! ((λ+1)/2)·Σᵢ‖yᵢ − ΦG(zᵢ)‖² + B·(w_lip Σ_{l<H} ‖I − W_lᵀW_l‖²_F + w_null σ₁(ΦW_H)²)
//! ```
//!
//! divided by `B(λ+1)/2`, so the learning rate means the same thing across a
//! λ sweep. The layer penalties stand in for `ε²‖ΦJ_G‖²_op`, which is only
//! monitored. `Φ` is never modified.

mod ablation;
mod config;

use std::time::Instant;

use rand::seq::SliceRandom;

pub use ablation::{ablation_sweep, records_csv, AblationInputs, AblationRecord, CellMetrics, Method};
pub use config::{parse_kv, AeConfig, Optimizer, TrainConfig};

use crate::data::{Dataset, LatentSet};
use crate::error::{check_len, Error, Result};
use crate::exec::Exec;
use crate::linalg::{dot, norm2, operator_norm, DenseMatrix, SpectralTracker};
use crate::losses::{
    fitting_loss_batch, lipschitz_penalty, nullspace_penalty, nullspace_penalty_tracked,
    LossBreakdown, SensedModel, NORM_TOL,
};
use crate::network::{Activation, DenseNet, NetGradients};
use crate::rng::{mix, stream, Purpose};
use crate::sensing::SamplingMatrix;
use crate::trustregion::InnerMaxProblem;

/// Relative residual for the warm-started top singular pair of `ΦW_H`.
const TRACK_TOL: f64 = 1e-7;
/// Subspace iterations per step for that pair.
const TRACK_ITERS: usize = 30;

/// Latent codes with their sensed targets `yᵢ = Φxᵢ` (rows).
#[derive(Clone, Copy, Debug)]
pub struct SensedSplit<'a> {
    pub latents: &'a LatentSet,
    pub targets: &'a DenseMatrix,
}

impl<'a> SensedSplit<'a> {
    pub fn new(latents: &'a LatentSet, targets: &'a DenseMatrix) -> Result<Self> {
        check_len("targets per latent code", latents.count(), targets.rows())?;
        Ok(SensedSplit { latents, targets })
    }

    pub fn count(&self) -> usize {
        self.latents.count()
    }
}

/// Parameter update rule with its state.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    rule: Optimizer,
    velocity: Option<NetGradients>,
}

impl OptimizerState {
    pub fn new(rule: Optimizer) -> Self {
        OptimizerState {
            rule,
            velocity: None,
        }
    }

    pub fn step(&mut self, net: &mut DenseNet, grads: &NetGradients, lr: f64) {
        match self.rule {
            Optimizer::Sgd => net.apply_gradients(grads, lr),
            Optimizer::Momentum(beta) => {
                let v = self
                    .velocity
                    .get_or_insert_with(|| NetGradients::zeros_like(net));
                v.scale(beta);
                v.add_scaled(1.0, grads);
                net.apply_gradients(v, lr);
            }
        }
    }
}

fn permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Purpose::BatchOrder, epoch as u64));
    order
}

/// Per-epoch reconstruction losses; entry 0 is the initialization.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AeHistory {
    pub train: Vec<f64>,
    pub test: Vec<f64>,
    pub seconds: Vec<f64>,
}

impl AeHistory {
    /// `epoch,train_loss,test_loss` (test column empty without a test set).
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "train_loss", "test_loss"])?;
        for (e, tr) in self.train.iter().enumerate() {
            let te = self.test.get(e).map_or_else(String::new, |v| v.to_string());
            w.write_record([e.to_string(), tr.to_string(), te])?;
        }
        w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))
    }
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub encoder: DenseNet,
    pub generator: DenseNet,
    pub history: AeHistory,
}

impl Autoencoder {
    pub fn encode(&self, data: &Dataset) -> Result<LatentSet> {
        LatentSet::new(self.encoder.output_batch(data.samples())?)
    }
}

/// Mean squared reconstruction error `‖x − G(E(x))‖²` over a dataset.
pub fn reconstruction_loss(encoder: &DenseNet, decoder: &DenseNet, data: &Dataset) -> Result<f64> {
    let z = encoder.output_batch(data.samples())?;
    let x_hat = decoder.output_batch(&z)?;
    let err: f64 = x_hat
        .as_slice()
        .iter()
        .zip(data.samples().as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(err / data.count() as f64)
}

/// Sigmoid autoencoder `n → hidden → latent → hidden → n`; the decoder half
/// is the generator warm start.
pub fn train_autoencoder(data: &Dataset, test: Option<&Dataset>, cfg: &AeConfig) -> Result<Autoencoder> {
    let n = data.dim();
    let sig = [Activation::Sigmoid, Activation::Sigmoid];
    let encoder = DenseNet::seeded(&[n, cfg.hidden, cfg.latent], &sig, mix(cfg.seed, 1))?;
    let decoder = DenseNet::seeded(&[cfg.latent, cfg.hidden, n], &sig, mix(cfg.seed, 2))?;
    train_autoencoder_from(encoder, decoder, data, test, cfg)
}

/// Mini-batch training of a given encoder/decoder pair on the mean squared
/// reconstruction error.
pub fn train_autoencoder_from(
    mut encoder: DenseNet,
    mut decoder: DenseNet,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &AeConfig,
) -> Result<Autoencoder> {
    check_len("encoder input", data.dim(), encoder.input_dim())?;
    check_len("decoder input", encoder.output_dim(), decoder.input_dim())?;
    check_len("decoder output", data.dim(), decoder.output_dim())?;
    let mut history = AeHistory::default();
    let record = |h: &mut AeHistory, e: &DenseNet, d: &DenseNet, secs: f64| -> Result<f64> {
        let tr = reconstruction_loss(e, d, data)?;
        h.train.push(tr);
        if let Some(t) = test {
            h.test.push(reconstruction_loss(e, d, t)?);
        }
        h.seconds.push(secs);
        Ok(tr)
    };
    record(&mut history, &encoder, &decoder, 0.0)?;

    let mut enc_opt = OptimizerState::new(cfg.optimizer);
    let mut dec_opt = OptimizerState::new(cfg.optimizer);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        for chunk in permutation(data.count(), cfg.seed, epoch).chunks(cfg.batch_size) {
            let x = data.samples().select_rows(chunk);
            let enc_trace = encoder.forward_batch(&x)?;
            let dec_trace = decoder.forward_batch(enc_trace.output())?;
            let mut upstream = dec_trace.output().clone();
            upstream.add_scaled(-1.0, &x);
            upstream.scale(2.0 / chunk.len() as f64);
            let (dec_grads, dz) = decoder.backward_batch(&dec_trace, &upstream)?;
            let (enc_grads, _) = encoder.backward_batch(&enc_trace, &dz)?;
            if !dec_grads.is_finite() || !enc_grads.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: "non-finite gradient".into(),
                });
            }
            dec_opt.step(&mut decoder, &dec_grads, cfg.learning_rate);
            enc_opt.step(&mut encoder, &enc_grads, cfg.learning_rate);
        }
        let loss = record(&mut history, &encoder, &decoder, start.elapsed().as_secs_f64())?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: format!("reconstruction loss {loss}"),
            });
        }
    }
    Ok(Autoencoder {
        encoder,
        generator: decoder,
        history,
    })
}

/// Per-epoch breakdowns. Entry 0 is the warm start before any update, so
/// `train.len() == completed_epochs() + 1`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub eps: f64,
    pub train: Vec<LossBreakdown>,
    pub test: Vec<LossBreakdown>,
    /// Wall time per epoch. Kept out of the CSV so that reruns are
    /// byte-identical.
    pub seconds: Vec<f64>,
}

impl TrainHistory {
    pub fn completed_epochs(&self) -> usize {
        self.train.len().saturating_sub(1)
    }

    /// `epoch,split,fitting,adversarial,lipschitz_penalty,nullspace_penalty,total`
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "epoch",
            "split",
            "fitting",
            "adversarial",
            "lipschitz_penalty",
            "nullspace_penalty",
            "total",
        ])?;
        for (e, tr) in self.train.iter().enumerate() {
            let mut rows = vec![("train", tr)];
            if let Some(te) = self.test.get(e) {
                rows.push(("test", te));
            }
            for (split, b) in rows {
                w.write_record([
                    e.to_string(),
                    split.to_string(),
                    b.fitting.to_string(),
                    b.adversarial.to_string(),
                    b.lipschitz_penalty.to_string(),
                    b.nullspace_penalty.to_string(),
                    b.total.to_string(),
                ])?;
            }
        }
        w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))
    }
}

/// Sum of Lipschitz penalties on the hidden layers and the null-space
/// penalty on the last layer.
pub fn layer_penalties(net: &DenseNet, phi: &SamplingMatrix) -> Result<(f64, f64)> {
    let h = net.depth();
    let lip = net.layers()[..h - 1]
        .iter()
        .map(|l| lipschitz_penalty(&l.weights).value)
        .sum();
    let null = nullspace_penalty(phi, &net.layers()[h - 1].weights)?.value;
    Ok((lip, null))
}

/// Fitting loss and exact linearized adversarial risk, both averaged over the
/// first `samples` entries of `split`, plus the layer penalties.
pub fn monitor(
    net: &DenseNet,
    phi: &SamplingMatrix,
    split: SensedSplit,
    eps: f64,
    samples: usize,
    exec: Exec,
) -> Result<LossBreakdown> {
    let model = SensedModel::new(net, phi)?;
    let n = samples.min(split.count());
    let pairs = exec.try_map(n, |i| {
        let lin = model.linearize(split.latents.code(i), split.targets.row(i))?;
        let adv = lin.solve(eps)?.value;
        Ok::<_, Error>((lin.fitting(), adv))
    })?;
    let fit = pairs.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let adv = pairs.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let (lip, null) = layer_penalties(net, phi)?;
    Ok(LossBreakdown::table(fit, adv, lip, null))
}

/// Radius at which the mean exact adversarial risk over the first `samples`
/// codes equals `ratio` times their mean fitting loss. Each sample's SVD is
/// computed once; the search is a bracketing bisection on ε.
pub fn calibrate_eps(
    net: &DenseNet,
    phi: &SamplingMatrix,
    split: SensedSplit,
    ratio: f64,
    samples: usize,
    exec: Exec,
) -> Result<f64> {
    if !(ratio > 1.0) {
        return Err(Error::invalid("eps ratio", format!("{ratio} must exceed 1")));
    }
    let model = SensedModel::new(net, phi)?;
    let n = samples.min(split.count());
    let cached = exec.try_map(n, |i| {
        let lin = model.linearize(split.latents.code(i), split.targets.row(i))?;
        Ok::<_, Error>((InnerMaxProblem::new(&lin.p)?, lin.y_hat))
    })?;
    let fit = cached.iter().map(|(_, y)| dot(y, y)).sum::<f64>() / n as f64;
    if !(fit > 0.0) {
        return Err(Error::invalid("calibration", "fitting loss is zero; the ratio is undefined"));
    }
    let target = ratio * fit;
    let mean_adv = |eps: f64| -> Result<f64> {
        let v = exec.try_map(n, |i| cached[i].0.solve(&cached[i].1, eps).map(|s| s.value))?;
        Ok(v.iter().sum::<f64>() / n as f64)
    };
    let (mut lo, mut hi) = (0.0, 1e-3);
    let mut doublings = 0;
    while mean_adv(hi)? < target {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > 200 {
            return Err(Error::invalid("calibration", "the generator's Jacobian vanishes on the calibration set"));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo <= 1e-12 * hi {
            break;
        }
        if mean_adv(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// `eps` from the config, or calibrated on `split` at the warm start.
pub fn resolve_eps(
    net: &DenseNet,
    phi: &SamplingMatrix,
    split: SensedSplit,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<f64> {
    match cfg.eps {
        Some(e) if e > 0.0 => Ok(e),
        Some(e) => Err(Error::invalid("eps", format!("{e} must be positive"))),
        None => calibrate_eps(net, phi, split, cfg.eps_ratio, cfg.monitor_samples, exec),
    }
}

/// Gradient of the normalized per-batch objective.
struct StepObjective<'a> {
    phi: &'a SamplingMatrix,
    /// `2/(λ+1)`
    penalty_scale: f64,
    lipschitz_weight: f64,
    nullspace_weight: f64,
    fit: bool,
    tracker: SpectralTracker,
}

impl StepObjective<'_> {
    fn gradient(&mut self, net: &DenseNet, zs: &DenseMatrix, ys: &DenseMatrix) -> Result<NetGradients> {
        let mut g = if self.fit {
            let (_, mut g) = fitting_loss_batch(net, self.phi, zs, ys)?;
            g.scale(1.0 / zs.rows() as f64);
            g
        } else {
            NetGradients::zeros_like(net)
        };
        let h = net.depth();
        if self.lipschitz_weight > 0.0 {
            let s = self.penalty_scale * self.lipschitz_weight;
            for l in 0..h - 1 {
                let t = lipschitz_penalty(&net.layers()[l].weights);
                g.0[l].weights.add_scaled(s, &t.gradient);
            }
        }
        if self.nullspace_weight > 0.0 {
            let t = nullspace_penalty_tracked(
                self.phi,
                &net.layers()[h - 1].weights,
                &mut self.tracker,
                TRACK_TOL,
            )?;
            g.0[h - 1]
                .weights
                .add_scaled(self.penalty_scale * self.nullspace_weight, &t.gradient);
        }
        Ok(g)
    }

    fn value(&self, b: &LossBreakdown) -> f64 {
        b.fitting
            + self.penalty_scale
                * (self.lipschitz_weight * b.lipschitz_penalty + self.nullspace_weight * b.nullspace_penalty)
    }
}

fn finetune(
    generator: &DenseNet,
    phi: &SamplingMatrix,
    train: SensedSplit,
    test: Option<SensedSplit>,
    cfg: &TrainConfig,
    penalties: bool,
    exec: Exec,
) -> Result<(DenseNet, TrainHistory)> {
    check_len("generator latent dimension", train.latents.dim(), generator.input_dim())?;
    check_len("target width", phi.sensed_dim(), train.targets.cols())?;
    if !cfg.lambda.is_finite() {
        return Err(Error::invalid("lambda", "must be finite"));
    }
    let eps = resolve_eps(generator, phi, train, cfg, exec)?;
    let (lw, nw) = if penalties {
        cfg.penalty_weights(eps)
    } else {
        (0.0, 0.0)
    };
    let mut objective = StepObjective {
        phi,
        penalty_scale: 2.0 / (cfg.lambda + 1.0),
        lipschitz_weight: lw,
        nullspace_weight: nw,
        fit: true,
        tracker: SpectralTracker::with_cap(TRACK_ITERS),
    };
    let observe = |net: &DenseNet, h: &mut TrainHistory, secs: f64| -> Result<LossBreakdown> {
        let tr = monitor(net, phi, train, eps, cfg.monitor_samples, exec)?;
        h.train.push(tr);
        if let Some(t) = test {
            h.test.push(monitor(net, phi, t, eps, cfg.monitor_samples, exec)?);
        }
        h.seconds.push(secs);
        Ok(tr)
    };

    let mut net = generator.clone();
    let mut history = TrainHistory {
        eps,
        ..TrainHistory::default()
    };
    let warm = observe(&net, &mut history, 0.0)?;
    let mut best = objective.value(&warm);
    let mut stale = 0;
    let mut opt = OptimizerState::new(cfg.optimizer);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        for chunk in permutation(train.count(), cfg.seed, epoch).chunks(cfg.batch_size) {
            let zs = train.latents.codes().select_rows(chunk);
            let ys = train.targets.select_rows(chunk);
            let g = objective.gradient(&net, &zs, &ys)?;
            if !g.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: "non-finite gradient".into(),
                });
            }
            opt.step(&mut net, &g, cfg.learning_rate);
        }
        let rec = observe(&net, &mut history, start.elapsed().as_secs_f64())?;
        if !rec.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: "non-finite loss".into(),
            });
        }
        if rec.adversarial > cfg.fail_factor * warm.adversarial {
            return Err(Error::Diverged {
                epoch,
                reason: format!(
                    "exact adversarial risk {} exceeds {}x the warm start's {}",
                    rec.adversarial, cfg.fail_factor, warm.adversarial
                ),
            });
        }
        let value = objective.value(&rec);
        if value < best {
            best = value;
            stale = 0;
        } else {
            stale += 1;
            if cfg.early_stop_patience > 0 && stale >= cfg.early_stop_patience {
                break;
            }
        }
    }
    Ok((net, history))
}

/// Adversarial fine-tuning on the surrogate objective.
pub fn finetune_dcsat(
    generator: &DenseNet,
    phi: &SamplingMatrix,
    train: SensedSplit,
    test: Option<SensedSplit>,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<(DenseNet, TrainHistory)> {
    finetune(generator, phi, train, test, cfg, true, exec)
}

/// Plain fitting fine-tune with every adversarial penalty disabled.
pub fn train_dcs_baseline(
    generator: &DenseNet,
    phi: &SamplingMatrix,
    train: SensedSplit,
    test: Option<SensedSplit>,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<(DenseNet, TrainHistory)> {
    finetune(generator, phi, train, test, cfg, false, exec)
}

/// Spectral statistics of the linearized models over a split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralSnapshot {
    pub exact_adv_risk: f64,
    pub fitting: f64,
    /// Mean `σ₁(ΦJ_G(zᵢ))`.
    pub top_sigma: f64,
    /// Mean `‖Uᵢᵀŷᵢ‖`: the part of the residual the adversary can reach.
    pub projected_residual: f64,
}

pub fn spectral_snapshot(
    net: &DenseNet,
    phi: &SamplingMatrix,
    split: SensedSplit,
    eps: f64,
    exec: Exec,
) -> Result<SpectralSnapshot> {
    let model = SensedModel::new(net, phi)?;
    let n = split.count();
    let rows = exec.try_map(n, |i| {
        let lin = model.linearize(split.latents.code(i), split.targets.row(i))?;
        let prob = InnerMaxProblem::new(&lin.p)?;
        let c = prob.coefficients(&lin.y_hat)?;
        let adv = prob.solve(&lin.y_hat, eps)?.value;
        Ok::<_, Error>([adv, lin.fitting(), prob.lambda_max().sqrt(), norm2(&c)])
    })?;
    let mean = |j: usize| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
    Ok(SpectralSnapshot {
        exact_adv_risk: mean(0),
        fitting: mean(1),
        top_sigma: mean(2),
        projected_residual: mean(3),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TightnessReport {
    pub steps: usize,
    pub before: SpectralSnapshot,
    pub after: SpectralSnapshot,
    /// `(before − after)/before` of the mean exact adversarial risk.
    pub relative_reduction: f64,
}

/// Runs `steps` full-batch gradient steps of the fine-tuning objective (or of
/// its penalties alone) and reports how the exact adversarial risk and the
/// spectrum of `P` moved.
pub fn surrogate_tightness_check(
    generator: &DenseNet,
    phi: &SamplingMatrix,
    split: SensedSplit,
    eps: f64,
    steps: usize,
    cfg: &TrainConfig,
    penalty_only: bool,
    exec: Exec,
) -> Result<(DenseNet, TightnessReport)> {
    if !(eps > 0.0) {
        return Err(Error::invalid("eps", format!("{eps} must be positive")));
    }
    let (lw, nw) = cfg.penalty_weights(eps);
    let mut objective = StepObjective {
        phi,
        penalty_scale: 2.0 / (cfg.lambda + 1.0),
        lipschitz_weight: lw,
        nullspace_weight: nw,
        fit: !penalty_only,
        tracker: SpectralTracker::with_cap(TRACK_ITERS),
    };
    let before = spectral_snapshot(generator, phi, split, eps, exec)?;
    let mut net = generator.clone();
    let mut opt = OptimizerState::new(cfg.optimizer);
    for step in 0..steps {
        let g = objective.gradient(&net, split.latents.codes(), split.targets)?;
        if !g.is_finite() {
            return Err(Error::Diverged {
                epoch: step,
                reason: "non-finite gradient".into(),
            });
        }
        opt.step(&mut net, &g, cfg.learning_rate);
    }
    let after = spectral_snapshot(&net, phi, split, eps, exec)?;
    let relative_reduction = if before.exact_adv_risk > 0.0 {
        (before.exact_adv_risk - after.exact_adv_risk) / before.exact_adv_risk
    } else {
        0.0
    };
    Ok((
        net,
        TightnessReport {
            steps,
            before,
            after,
            relative_reduction,
        },
    ))
}

/// Mean operator norm of `ΦJ_G` over a split, by power iteration.
pub fn mean_jacobian_norm(net: &DenseNet, phi: &SamplingMatrix, latents: &LatentSet) -> Result<f64> {
    let model = SensedModel::new(net, phi)?;
    let mut total = 0.0;
    for i in 0..latents.count() {
        let trace = model.net().forward(latents.code(i))?;
        total += operator_norm(&model.net().jacobian_from_trace(&trace), NORM_TOL).sigma;
    }
    Ok(total / latents.count() as f64)
}

#[cfg(test)]
mod tests;
