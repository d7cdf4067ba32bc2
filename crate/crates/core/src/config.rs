//! Training configuration and its `key=value` file form.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::elbo::{PiPlacement, DEFAULT_ENTROPY_SCALE};
use crate::error::{arg_err, Error, Result};
use crate::gaussian::MAX_RHO;

/// Whether the subset weights are learned or frozen at uniform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PiMode {
    #[default]
    Learned,
    Uniform,
}

impl FromStr for PiMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Self::Learned),
            "uniform" | "fixed-uniform" => Ok(Self::Uniform),
            _ => arg_err(format!("pi mode must be learned or uniform, got {s:?}")),
        }
    }
}

impl fmt::Display for PiMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Learned => "learned",
            Self::Uniform => "uniform",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub latent_dim: usize,
    /// Hidden widths of every encoder; decoders mirror them.
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta: f64,
    pub rho: f64,
    pub entropy_scale: f64,
    pub seed: u64,
    pub pi_mode: PiMode,
    /// Moves `π_k` off the KL term.
    pub strict_eq4: bool,
    /// Rows of held-out data used for the trace report.
    pub report_rows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            hidden: vec![64],
            batch_size: 128,
            epochs: 200,
            learning_rate: 1e-3,
            beta: 1.0,
            rho: 0.2,
            entropy_scale: DEFAULT_ENTROPY_SCALE,
            seed: 0,
            pi_mode: PiMode::Learned,
            strict_eq4: false,
            report_rows: 512,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Argument(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => arg_err(format!("invalid boolean {value:?} for {key}")),
    }
}

impl TrainConfig {
    pub fn placement(&self) -> PiPlacement {
        if self.strict_eq4 {
            PiPlacement::ReconOnly
        } else {
            PiPlacement::ReconAndKl
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return arg_err(format!("beta must be positive, got {}", self.beta));
        }
        if !(0.0..=MAX_RHO).contains(&self.rho) {
            return arg_err(format!("rho must lie in [0, {MAX_RHO}], got {}", self.rho));
        }
        if self.batch_size == 0 {
            return arg_err("batch size must be at least 1");
        }
        if self.latent_dim == 0 || self.hidden.contains(&0) {
            return arg_err("layer widths must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return arg_err("learning rate must be positive");
        }
        if !(self.entropy_scale >= 0.0) {
            return arg_err("entropy scale must be non-negative");
        }
        Ok(())
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "latent_dim" | "latent-dim" => self.latent_dim = parse(key, value)?,
            "hidden" => {
                self.hidden = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "batch" | "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr" | "learning_rate" => self.learning_rate = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "rho" => self.rho = parse(key, value)?,
            "entropy_scale" | "entropy-scale" => self.entropy_scale = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "pi_mode" | "pi-mode" => self.pi_mode = value.parse()?,
            "strict_eq4" | "strict-eq4" => self.strict_eq4 = parse_bool(key, value)?,
            "report_rows" => self.report_rows = parse(key, value)?,
            _ => return arg_err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    pub fn apply(&mut self, entries: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in entries {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_entries(&self) -> BTreeMap<String, String> {
        let hidden: Vec<String> = self.hidden.iter().map(ToString::to_string).collect();
        [
            ("latent_dim", self.latent_dim.to_string()),
            ("hidden", hidden.join(",")),
            ("batch", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.learning_rate.to_string()),
            ("beta", self.beta.to_string()),
            ("rho", self.rho.to_string()),
            ("entropy_scale", self.entropy_scale.to_string()),
            ("seed", self.seed.to_string()),
            ("pi_mode", self.pi_mode.to_string()),
            ("strict_eq4", self.strict_eq4.to_string()),
            ("report_rows", self.report_rows.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}
