//! λ × sampling-rate sweep of DCS and DCSAT fine-tunes from one warm start.

use std::fmt;

use crate::attack::evaluate_model;
use crate::data::{Dataset, LatentSet};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::network::DenseNet;
use crate::rng::mix;
use crate::sensing::make_sampler;

use super::{finetune_dcsat, resolve_eps, train_dcs_baseline, SensedSplit, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Dcs,
    Dcsat,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Dcs => "DCS",
            Method::Dcsat => "DCSAT",
        })
    }
}

/// Held-out metrics of one cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellMetrics {
    pub adv_risk: f64,
    pub fit_loss: f64,
    pub total: f64,
    pub linearized_adv_risk: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRecord {
    pub method: Method,
    /// `None` for the baseline.
    pub lambda: Option<f64>,
    pub sr: f64,
    pub seed: u64,
    pub eps: f64,
    /// `None` when training diverged; `failure` then says why.
    pub metrics: Option<CellMetrics>,
    pub failure: Option<String>,
}

pub struct AblationInputs<'a> {
    pub generator: &'a DenseNet,
    pub train: &'a Dataset,
    pub train_latents: &'a LatentSet,
    pub test: &'a Dataset,
    pub test_latents: &'a LatentSet,
}

/// Every cell at one sampling rate shares the mask, the radius and the seed,
/// so rows at the same SR differ only in method and λ.
pub fn ablation_sweep(
    lambdas: &[f64],
    srs: &[f64],
    base: &TrainConfig,
    inputs: &AblationInputs,
    exec: Exec,
) -> Result<Vec<AblationRecord>> {
    let mut lambdas = lambdas.to_vec();
    lambdas.sort_by(|a, b| b.total_cmp(a));
    let mut srs = srs.to_vec();
    srs.sort_by(|a, b| b.total_cmp(a));

    let mut records = Vec::new();
    for (si, &sr) in srs.iter().enumerate() {
        let seed = mix(base.seed, si as u64);
        let phi = make_sampler(inputs.train.dim(), sr, seed)?;
        let train_y = inputs.train.sensed(&phi)?;
        let test_y = inputs.test.sensed(&phi)?;
        let train = SensedSplit::new(inputs.train_latents, &train_y)?;
        let test = SensedSplit::new(inputs.test_latents, &test_y)?;
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.eps = Some(resolve_eps(inputs.generator, &phi, train, base, exec)?);
        let eps = cfg.eps.unwrap();

        let mut cells: Vec<(Method, Option<f64>)> = vec![(Method::Dcs, None)];
        cells.extend(lambdas.iter().map(|&l| (Method::Dcsat, Some(l))));
        for (method, lambda) in cells {
            let mut cell_cfg = cfg.clone();
            if let Some(l) = lambda {
                cell_cfg.lambda = l;
            }
            let trained = match method {
                Method::Dcs => train_dcs_baseline(inputs.generator, &phi, train, None, &cell_cfg, exec),
                Method::Dcsat => finetune_dcsat(inputs.generator, &phi, train, None, &cell_cfg, exec),
            };
            let (metrics, failure) = match trained {
                Ok((net, _)) => {
                    let e = evaluate_model(
                        &net,
                        &phi,
                        test.latents,
                        test.targets,
                        eps,
                        base.n_queries,
                        seed,
                        exec,
                    )?;
                    let m = CellMetrics {
                        adv_risk: e.adv_risk,
                        fit_loss: e.fit_loss,
                        total: e.total,
                        linearized_adv_risk: e.linearized_risk,
                    };
                    (Some(m), None)
                }
                Err(Error::Diverged { epoch, reason }) => {
                    (None, Some(format!("epoch {epoch}: {reason}")))
                }
                Err(e) => return Err(e),
            };
            records.push(AblationRecord {
                method,
                lambda,
                sr,
                seed,
                eps,
                metrics,
                failure,
            });
        }
    }
    Ok(records)
}

/// `method,lambda,sr,adv_risk,fit_loss,total,seed,eps,linearized_adv_risk`;
/// diverged cells carry `fail` in the metric columns.
pub fn records_csv(records: &[AblationRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "method",
        "lambda",
        "sr",
        "adv_risk",
        "fit_loss",
        "total",
        "seed",
        "eps",
        "linearized_adv_risk",
    ])?;
    for r in records {
        let metric = |f: fn(&CellMetrics) -> f64| {
            r.metrics
                .as_ref()
                .map_or_else(|| "fail".to_string(), |m| f(m).to_string())
        };
        w.write_record([
            r.method.to_string(),
            r.lambda.map_or_else(String::new, |l| l.to_string()),
            r.sr.to_string(),
            metric(|m| m.adv_risk),
            metric(|m| m.fit_loss),
            metric(|m| m.total),
            r.seed.to_string(),
            r.eps.to_string(),
            metric(|m| m.linearized_adv_risk),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))
}
