//! Distribution and subset types shared by the rest of the crate.

use crate::error::{arg_err, Result};

/// Largest modality count accepted by [`enumerate_subsets`].
pub const MAX_MODALITIES: usize = 16;

/// Upper cap on the expert correlation.
pub const MAX_RHO: f64 = 0.95;

/// A Gaussian over the latent space with diagonal covariance.
///
/// The standard deviation is stored rather than the variance.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.is_empty() {
            return arg_err("gaussian must have at least one dimension");
        }
        if mean.len() != std.len() {
            return arg_err(format!("mean has length {} but std has length {}", mean.len(), std.len()));
        }
        if let Some(d) = std.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
            return arg_err(format!("std[{d}] = {} is not strictly positive", std[d]));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return arg_err("mean contains a non-finite value");
        }
        Ok(Self { mean, std })
    }

    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim], vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn variance(&self) -> Vec<f64> {
        self.std.iter().map(|s| s * s).collect()
    }

    /// Log density at `z`.
    pub fn log_pdf(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.dim());
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        self.mean
            .iter()
            .zip(&self.std)
            .zip(z)
            .map(|((m, s), x)| {
                let r = (x - m) / s;
                -0.5 * r * r - s.ln() - half_ln_2pi
            })
            .sum()
    }
}

/// Sum of the per-dimension variances, i.e. the trace of the covariance.
pub fn trace_of_diagonal(g: &DiagonalGaussian) -> f64 {
    g.std.iter().map(|s| s * s).sum()
}

/// A non-empty subset of the modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubsetMask {
    bits: u32,
    modalities: u8,
}

impl SubsetMask {
    pub fn from_bits(bits: u32, modalities: usize) -> Result<Self> {
        if modalities == 0 || modalities > MAX_MODALITIES {
            return arg_err(format!("modality count {modalities} outside [1, {MAX_MODALITIES}]"));
        }
        if bits == 0 {
            return arg_err("subset mask must select at least one modality");
        }
        if bits >> modalities != 0 {
            return arg_err(format!("mask {bits:#b} selects modalities beyond {modalities}"));
        }
        Ok(Self { bits, modalities: modalities as u8 })
    }

    pub fn full(modalities: usize) -> Result<Self> {
        if modalities == 0 || modalities > MAX_MODALITIES {
            return arg_err(format!("modality count {modalities} outside [1, {MAX_MODALITIES}]"));
        }
        Self::from_bits((1u32 << modalities) - 1, modalities)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// 1-based position in the ascending enumeration, equal to the binary value.
    pub fn index(&self) -> usize {
        self.bits as usize
    }

    pub fn modalities(&self) -> usize {
        self.modalities as usize
    }

    pub fn contains(&self, modality: usize) -> bool {
        modality < self.modalities() && self.bits & (1 << modality) != 0
    }

    pub fn cardinality(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.modalities()).filter(move |m| self.contains(*m))
    }

    pub fn flags(&self) -> Vec<bool> {
        (0..self.modalities()).map(|m| self.contains(m)).collect()
    }

    /// Label such as `{0,2}` used in reports.
    pub fn label(&self) -> String {
        let parts: Vec<String> = self.members().map(|m| m.to_string()).collect();
        format!("{{{}}}", parts.join(","))
    }
}

/// All non-empty subsets of `modalities` modalities, in ascending binary order.
pub fn enumerate_subsets(modalities: usize) -> Result<Vec<SubsetMask>> {
    if modalities == 0 || modalities > MAX_MODALITIES {
        return arg_err(format!("modality count {modalities} outside [1, {MAX_MODALITIES}]"));
    }
    let count = (1u32 << modalities) - 1;
    Ok((1..=count).map(|bits| SubsetMask { bits, modalities: modalities as u8 }).collect())
}

/// Expert correlation used for every off-diagonal of the per-dimension covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationSpec {
    rho: f64,
}

impl CorrelationSpec {
    pub fn new(rho: f64) -> Result<Self> {
        if !(0.0..=MAX_RHO).contains(&rho) {
            return arg_err(format!("rho = {rho} outside [0, {MAX_RHO}]"));
        }
        Ok(Self { rho })
    }

    pub fn independent() -> Self {
        Self { rho: 0.0 }
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }
}
