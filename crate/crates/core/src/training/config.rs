//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; unknown
//! keys are rejected so typos do not silently fall back to defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    /// Heavy-ball momentum with coefficient β.
    Momentum(f64),
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Optimizer::Sgd => f.write_str("sgd"),
            Optimizer::Momentum(b) => write!(f, "sgd_momentum({b})"),
        }
    }
}

impl FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "sgd_momentum" | "momentum" => Ok(Optimizer::Momentum(0.9)),
            _ => s
                .strip_prefix("sgd_momentum(")
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|b| b.parse::<f64>().ok())
                .filter(|b| (0.0..1.0).contains(b))
                .map(Optimizer::Momentum)
                .ok_or_else(|| format!("unknown optimizer `{s}` (sgd, sgd_momentum, sgd_momentum(β))")),
        }
    }
}

/// Fine-tuning configuration (DCS and DCSAT).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    /// Perturbation radius; `None` calibrates it so the warm start's exact
    /// adversarial risk is `eps_ratio` times its fitting loss.
    pub eps: Option<f64>,
    pub eps_ratio: f64,
    pub sr: f64,
    pub seed: u64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` (`auto`) means `ε²`. The default is small because
    /// `‖I − WᵀW‖²_F` of a sigmoid autoencoder's decoder is of order 1e6.
    pub lipschitz_weight: Option<f64>,
    /// `None` (`auto`) means `ε²`.
    pub nullspace_weight: Option<f64>,
    pub optimizer: Optimizer,
    /// Stop after this many epochs without improving the training objective;
    /// 0 disables early stopping.
    pub early_stop_patience: usize,
    /// Samples per split on which the exact adversarial risk is monitored.
    pub monitor_samples: usize,
    pub n_queries: usize,
    /// A run fails once its exact adversarial risk exceeds this multiple of
    /// the warm start's.
    pub fail_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 2e4,
            eps: None,
            eps_ratio: 3.0,
            sr: 0.8,
            seed: 7,
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 64,
            lipschitz_weight: Some(1e-5),
            nullspace_weight: Some(30.0),
            optimizer: Optimizer::Momentum(0.9),
            early_stop_patience: 0,
            monitor_samples: 64,
            n_queries: crate::attack::DEFAULT_QUERIES,
            fail_factor: 5.0,
        }
    }
}

/// Autoencoder pretraining configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct AeConfig {
    pub hidden: usize,
    pub latent: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            hidden: 100,
            latent: 30,
            seed: 7,
            learning_rate: 0.03,
            epochs: 100,
            batch_size: 32,
            optimizer: Optimizer::Momentum(0.9),
        }
    }
}

fn bad(key: &str, value: &str, why: impl fmt::Display) -> Error {
    Error::InvalidArgument {
        name: "config value",
        reason: format!("{key} = {value}: {why}"),
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| bad(key, value, e))
}

fn positive(key: &str, value: &str) -> Result<f64> {
    let v: f64 = num(key, value)?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(bad(key, value, "must be positive"))
    }
}

fn nonnegative(key: &str, value: &str) -> Result<f64> {
    let v: f64 = num(key, value)?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(bad(key, value, "must be nonnegative"))
    }
}

fn count(key: &str, value: &str) -> Result<usize> {
    let v: usize = num(key, value)?;
    if v == 0 {
        return Err(bad(key, value, "must be at least 1"));
    }
    Ok(v)
}

fn weight(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "auto" {
        Ok(None)
    } else {
        nonnegative(key, value).map(Some)
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "lambda",
        "eps",
        "eps_ratio",
        "sr",
        "seed",
        "learning_rate",
        "epochs",
        "batch_size",
        "lipschitz_weight",
        "nullspace_weight",
        "optimizer",
        "early_stop_patience",
        "monitor_samples",
        "n_queries",
        "fail_factor",
    ];

    /// Applies one setting; `Ok(false)` if the key belongs elsewhere.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lambda" => self.lambda = nonnegative(key, value)?,
            "eps" => {
                self.eps = if value == "auto" {
                    None
                } else {
                    Some(positive(key, value)?)
                }
            }
            "eps_ratio" => {
                let r = num::<f64>(key, value)?;
                if !(r > 1.0 && r.is_finite()) {
                    return Err(bad(key, value, "must exceed 1"));
                }
                self.eps_ratio = r;
            }
            "sr" => {
                let sr = positive(key, value)?;
                if sr > 1.0 {
                    return Err(bad(key, value, "must lie in (0, 1]"));
                }
                self.sr = sr;
            }
            "seed" => self.seed = num(key, value)?,
            "learning_rate" => self.learning_rate = positive(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = count(key, value)?,
            "lipschitz_weight" => self.lipschitz_weight = weight(key, value)?,
            "nullspace_weight" => self.nullspace_weight = weight(key, value)?,
            "optimizer" => self.optimizer = value.parse().map_err(|e: String| bad(key, value, e))?,
            "early_stop_patience" => self.early_stop_patience = num(key, value)?,
            "monitor_samples" => self.monitor_samples = count(key, value)?,
            "n_queries" => self.n_queries = count(key, value)?,
            "fail_factor" => {
                let f = num::<f64>(key, value)?;
                if !(f > 1.0) {
                    return Err(bad(key, value, "must exceed 1"));
                }
                self.fail_factor = f;
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Resolved penalty weights for radius `eps`.
    pub fn penalty_weights(&self, eps: f64) -> (f64, f64) {
        (
            self.lipschitz_weight.unwrap_or(eps * eps),
            self.nullspace_weight.unwrap_or(eps * eps),
        )
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let w = |o: Option<f64>| o.map_or_else(|| "auto".to_string(), |v| v.to_string());
        vec![
            ("lambda", self.lambda.to_string()),
            ("eps", w(self.eps)),
            ("eps_ratio", self.eps_ratio.to_string()),
            ("sr", self.sr.to_string()),
            ("seed", self.seed.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lipschitz_weight", w(self.lipschitz_weight)),
            ("nullspace_weight", w(self.nullspace_weight)),
            ("optimizer", self.optimizer.to_string()),
            ("early_stop_patience", self.early_stop_patience.to_string()),
            ("monitor_samples", self.monitor_samples.to_string()),
            ("n_queries", self.n_queries.to_string()),
            ("fail_factor", self.fail_factor.to_string()),
        ]
    }
}

impl AeConfig {
    pub const KEYS: &'static [&'static str] = &[
        "ae_hidden",
        "latent_dim",
        "seed",
        "ae_learning_rate",
        "ae_epochs",
        "ae_batch_size",
        "ae_optimizer",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "ae_hidden" => self.hidden = count(key, value)?,
            "latent_dim" => self.latent = count(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "ae_learning_rate" => self.learning_rate = positive(key, value)?,
            "ae_epochs" => self.epochs = num(key, value)?,
            "ae_batch_size" => self.batch_size = count(key, value)?,
            "ae_optimizer" => self.optimizer = value.parse().map_err(|e: String| bad(key, value, e))?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("ae_hidden", self.hidden.to_string()),
            ("latent_dim", self.latent.to_string()),
            ("seed", self.seed.to_string()),
            ("ae_learning_rate", self.learning_rate.to_string()),
            ("ae_epochs", self.epochs.to_string()),
            ("ae_batch_size", self.batch_size.to_string()),
            ("ae_optimizer", self.optimizer.to_string()),
        ]
    }
}

/// Parses `key = value` lines, keeping the last value of a repeated key.
pub fn parse_kv(text: &str, origin: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            reason: format!("expected `key = value`, found `{line}`"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                reason: "empty key or value".into(),
            });
        }
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}
