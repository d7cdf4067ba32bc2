//! The subset-weighted evidence lower bound.
//!
//! Each non-empty subset `k` of the modalities contributes its own bound
//! `recon_k - β·KL_k`, weighted by a learnable probability `π_k`. A scaled
//! entropy of `π` is added so the weights are learned by entropy
//! maximization rather than collapsing onto the best subset.

use std::f64::consts::{LN_2, PI};

use crate::autodiff::{Matrix, NodeId, Tape};
use crate::data::ModalityData;
use crate::error::{arg_err, Result};
use crate::gaussian::{DiagonalGaussian, SubsetMask};

/// Default multiplier of the entropy of `π`.
pub const DEFAULT_ENTROPY_SCALE: f64 = 1000.0;

/// Learnable subset weights, stored as unconstrained logits.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetWeights {
    logits: Vec<f64>,
}

impl SubsetWeights {
    pub fn uniform(subsets: usize) -> Result<Self> {
        Self::from_logits(vec![0.0; subsets])
    }

    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return arg_err("subset weights need at least one subset");
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return arg_err("subset logits must be finite");
        }
        Ok(Self { logits })
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn pi(&self) -> Vec<f64> {
        let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    pub fn log_pi(&self) -> Vec<f64> {
        let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + self.logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        self.logits.iter().map(|l| l - lse).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LikelihoodFamily {
    /// Unit-variance Gaussian.
    Gaussian,
    /// Unit-scale Laplace.
    Laplace,
    /// Categorical over `classes` values.
    Categorical { classes: usize },
}

impl LikelihoodFamily {
    pub fn tag(&self) -> String {
        match self {
            Self::Gaussian => "gaussian".into(),
            Self::Laplace => "laplace".into(),
            Self::Categorical { classes } => format!("categorical:{classes}"),
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "gaussian" => Ok(Self::Gaussian),
            "laplace" => Ok(Self::Laplace),
            _ => match tag.strip_prefix("categorical:").map(str::parse::<usize>) {
                Some(Ok(c)) if c >= 2 => Ok(Self::Categorical { classes: c }),
                _ => arg_err(format!("unknown likelihood tag {tag:?}")),
            },
        }
    }
}

/// Per-modality likelihood family and reconstruction weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodSpec {
    families: Vec<LikelihoodFamily>,
    weights: Vec<f64>,
}

impl LikelihoodSpec {
    /// Weights from data dimensions: the widest modality gets 1, every other
    /// modality `max_dim / dim`.
    pub fn from_dims(families: Vec<LikelihoodFamily>, dims: &[usize]) -> Result<Self> {
        if families.len() != dims.len() || dims.is_empty() {
            return arg_err("one likelihood family per modality is required");
        }
        if dims.contains(&0) {
            return arg_err("modality dimension must be positive");
        }
        let max = *dims.iter().max().expect("non-empty") as f64;
        let weights = dims.iter().map(|d| max / *d as f64).collect();
        Ok(Self { families, weights })
    }

    pub fn with_weights(families: Vec<LikelihoodFamily>, weights: Vec<f64>) -> Result<Self> {
        if families.len() != weights.len() || weights.is_empty() {
            return arg_err("one weight per modality is required");
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return arg_err("likelihood weights must be positive");
        }
        Ok(Self { families, weights })
    }

    pub fn families(&self) -> &[LikelihoodFamily] {
        &self.families
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn modalities(&self) -> usize {
        self.families.len()
    }
}

/// `KL(q || N(0, I))` for a diagonal Gaussian `q`.
pub fn kl_diag_std_normal(q: &DiagonalGaussian) -> f64 {
    q.mean()
        .iter()
        .zip(q.std())
        .map(|(m, s)| {
            let v = s * s;
            0.5 * (v + m * m - 1.0 - v.ln())
        })
        .sum()
}

/// Weighted per-row reconstruction log-likelihood `Σ_m w_m log p(x_m | ·)`.
///
/// `decoded[m]` holds the decoder output for modality `m`: means for real
/// modalities, logits for categorical ones.
pub fn recon_log_lik(spec: &LikelihoodSpec, decoded: &[Matrix], observed: &[ModalityData]) -> Result<Vec<f64>> {
    if decoded.len() != spec.modalities() || observed.len() != spec.modalities() {
        return arg_err("decoded and observed must cover every modality");
    }
    let rows = decoded[0].rows();
    let mut out = vec![0.0; rows];
    let half_ln_2pi = 0.5 * (2.0 * PI).ln();
    for ((family, weight), (dec, obs)) in spec.families.iter().zip(&spec.weights).zip(decoded.iter().zip(observed)) {
        if dec.rows() != rows || obs.rows() != rows {
            return arg_err("row count differs between modalities");
        }
        match (family, obs) {
            (LikelihoodFamily::Gaussian, ModalityData::Real(x))
            | (LikelihoodFamily::Laplace, ModalityData::Real(x)) => {
                if x.shape() != dec.shape() {
                    return arg_err(format!("decoded {:?} vs observed {:?}", dec.shape(), x.shape()));
                }
                let gaussian = matches!(family, LikelihoodFamily::Gaussian);
                for (r, o) in out.iter_mut().enumerate() {
                    let ll: f64 = dec
                        .row(r)
                        .iter()
                        .zip(x.row(r))
                        .map(|(m, v)| {
                            let d = v - m;
                            if gaussian {
                                -0.5 * d * d - half_ln_2pi
                            } else {
                                -d.abs() - LN_2
                            }
                        })
                        .sum();
                    *o += weight * ll;
                }
            }
            (LikelihoodFamily::Categorical { classes }, ModalityData::Categorical(labels)) => {
                if dec.cols() != *classes {
                    return arg_err(format!("{} logits for {classes} classes", dec.cols()));
                }
                for (r, o) in out.iter_mut().enumerate() {
                    let row = dec.row(r);
                    let t = labels[r];
                    if t >= *classes {
                        return arg_err(format!("class {t} out of range"));
                    }
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    *o += weight * (row[t] - lse);
                }
            }
            _ => return arg_err(format!("likelihood {} does not match the observed data kind", family.tag())),
        }
    }
    Ok(out)
}

/// Entropy of `π`.
pub fn categorical_entropy(w: &SubsetWeights) -> f64 {
    w.pi().iter().zip(w.log_pi()).map(|(p, lp)| if *p > 0.0 { -p * lp } else { 0.0 }).sum()
}

/// Where `π_k` multiplies the per-subset bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PiPlacement {
    /// `Σ π_k (recon_k - β KL_k)`.
    #[default]
    ReconAndKl,
    /// `Σ (π_k recon_k - β KL_k)`.
    ReconOnly,
}

/// Subset-weighted objective, without the parameter-free constant.
pub fn codevae_objective(
    subsets: &[SubsetMask],
    per_subset_recon: &[f64],
    per_subset_kl: &[f64],
    w: &SubsetWeights,
    beta: f64,
    entropy_scale: f64,
    placement: PiPlacement,
) -> Result<f64> {
    let k = subsets.len();
    if per_subset_recon.len() != k || per_subset_kl.len() != k || w.len() != k {
        return arg_err(format!(
            "lengths differ: {k} subsets, {} recon, {} kl, {} weights",
            per_subset_recon.len(),
            per_subset_kl.len(),
            w.len()
        ));
    }
    if !(beta >= 0.0) || !(entropy_scale >= 0.0) {
        return arg_err("beta and entropy_scale must be non-negative");
    }
    let pi = w.pi();
    let bound: f64 = pi
        .iter()
        .zip(per_subset_recon.iter().zip(per_subset_kl))
        .map(|(p, (r, kl))| match placement {
            PiPlacement::ReconAndKl => p * (r - beta * kl),
            PiPlacement::ReconOnly => p * r - beta * kl,
        })
        .sum();
    let entropy = if entropy_scale == 0.0 { 0.0 } else { entropy_scale * categorical_entropy(w) };
    Ok(bound + entropy)
}

/// The same objective recorded on a tape.
///
/// `recon` and `kl` are `K x 1` nodes, `logits` is `1 x K`.
pub fn objective_on_tape(
    tape: &mut Tape,
    recon: NodeId,
    kl: NodeId,
    logits: NodeId,
    beta: f64,
    entropy_scale: f64,
    placement: PiPlacement,
) -> Result<NodeId> {
    let k = tape.shape(logits).1;
    if tape.shape(recon) != (k, 1) || tape.shape(kl) != (k, 1) || tape.shape(logits).0 != 1 {
        return arg_err("objective expects K x 1 recon/kl and 1 x K logits");
    }
    let log_pi = tape.log_softmax(logits);
    let pi = tape.exp(log_pi);
    let recon_t = tape.transpose(recon);
    let kl_t = tape.transpose(kl);
    let bound = match placement {
        PiPlacement::ReconAndKl => {
            let scaled_kl = tape.scale(kl_t, beta);
            let per = tape.sub(recon_t, scaled_kl)?;
            let weighted = tape.mul(pi, per)?;
            tape.sum(weighted)
        }
        PiPlacement::ReconOnly => {
            let weighted = tape.mul(pi, recon_t)?;
            let wsum = tape.sum(weighted);
            let kl_sum = tape.sum(kl_t);
            let scaled = tape.scale(kl_sum, beta);
            tape.sub(wsum, scaled)?
        }
    };
    if entropy_scale == 0.0 {
        return Ok(bound);
    }
    let plogp = tape.mul(pi, log_pi)?;
    let neg_entropy = tape.sum(plogp);
    let ent = tape.scale(neg_entropy, -entropy_scale);
    tape.add(bound, ent)
}
