//! Aggregation of Gaussian experts into a consensus posterior.
//!
//! Expert means are treated as correlated noisy measurements of the latent.
//! For each latent dimension `d` the experts' errors share the covariance
//! `Σ^d` with diagonal `σ_i²` and off-diagonals `ρ σ_i σ_j`. With a flat prior
//! the posterior precision is `1ᵀ (Σ^d)⁻¹ 1` and the posterior mean is the
//! column-sum weighted average of the expert means. The full block-diagonal
//! covariance over all dimensions is never formed on the fast path; only
//! [`code_consensus_oracle`] builds it, as an independent check.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{arg_err, Error, Result};
use crate::gaussian::{CorrelationSpec, DiagonalGaussian};
use crate::linalg::{cholesky_in_place, cholesky_solve_in_place};

/// Relative diagonal jitter for `Σ^d` with three or more experts, applied
/// only when the plain factorization fails.
pub const JITTER: f64 = 1e-9;

/// Largest `M′·D` the dense oracle accepts.
pub const ORACLE_MAX_SIZE: usize = 64;

/// Error covariance of the experts for one latent dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PerDimCovariance {
    size: usize,
    matrix: Vec<f64>,
}

impl PerDimCovariance {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.size + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.matrix
    }

    /// Lower Cholesky factor, or `None` if a pivot is not positive.
    pub fn cholesky(&self) -> Option<Vec<f64>> {
        let mut l = self.matrix.clone();
        cholesky_in_place(&mut l, self.size).then_some(l)
    }
}

pub fn build_sigma_d(stds_d: &[f64], spec: CorrelationSpec) -> Result<PerDimCovariance> {
    if stds_d.is_empty() {
        return arg_err("at least one expert is required");
    }
    if let Some(i) = stds_d.iter().position(|s| !(*s > 0.0)) {
        return arg_err(format!("expert {i} has non-positive std {}", stds_d[i]));
    }
    let n = stds_d.len();
    let rho = spec.rho();
    let mut matrix = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            matrix[i * n + j] = if i == j { stds_d[i] * stds_d[i] } else { rho * stds_d[i] * stds_d[j] };
        }
    }
    Ok(PerDimCovariance { size: n, matrix })
}

/// Inverse of one `Σ^d`, either explicit (one or two experts) or as a
/// Cholesky factor (jittered only if the plain one fails).
enum SigmaInverse {
    Explicit { n: usize, inv: [f64; 4] },
    Factor { n: usize, l: Vec<f64> },
}

impl SigmaInverse {
    fn new(stds: &[f64], rho: f64) -> Option<Self> {
        match stds {
            [s] => Some(Self::Explicit { n: 1, inv: [1.0 / (s * s), 0.0, 0.0, 0.0] }),
            [s1, s2] => {
                let (v1, v2, cov) = (s1 * s1, s2 * s2, rho * s1 * s2);
                let det = v1 * v2 - cov * cov;
                if !(det > 0.0) {
                    return None;
                }
                Some(Self::Explicit { n: 2, inv: [v2 / det, -cov / det, -cov / det, v1 / det] })
            }
            _ => {
                let n = stds.len();
                let build = |jitter: f64| {
                    let mut l = vec![0.0; n * n];
                    for i in 0..n {
                        for j in 0..=i {
                            l[i * n + j] = if i == j { stds[i] * stds[i] + jitter } else { rho * stds[i] * stds[j] };
                        }
                    }
                    cholesky_in_place(&mut l, n).then_some(Self::Factor { n, l })
                };
                build(0.0).or_else(|| {
                    let max_var = stds.iter().fold(0.0f64, |m, s| m.max(s * s));
                    build(JITTER * max_var)
                })
            }
        }
    }

    fn solve(&self, b: &mut [f64]) {
        match self {
            Self::Explicit { n: 1, inv } => b[0] *= inv[0],
            Self::Explicit { inv, .. } => {
                let (x0, x1) = (b[0], b[1]);
                b[0] = inv[0] * x0 + inv[1] * x1;
                b[1] = inv[2] * x0 + inv[3] * x1;
            }
            Self::Factor { n, l } => cholesky_solve_in_place(l, *n, b),
        }
    }
}

/// Column sums of `(Σ^d)⁻¹` for one latent dimension, i.e. the unnormalized
/// weights of each expert mean. Their total is the posterior precision.
///
/// Returns `None` when `Σ^d` is not positive definite.
pub fn precision_weights(stds: &[f64], rho: f64) -> Option<Vec<f64>> {
    let inv = SigmaInverse::new(stds, rho)?;
    let mut c = vec![1.0; stds.len()];
    inv.solve(&mut c);
    Some(c)
}

/// Reverse-mode adjoint of [`precision_weights`] with respect to the stds.
///
/// Uses `d(Σ⁻¹1) = -Σ⁻¹ dΣ Σ⁻¹ 1`; the jitter's dependence on the stds is
/// ignored.
pub(crate) fn precision_weights_adjoint(
    stds: &[f64],
    rho: f64,
    weights: &[f64],
    upstream: &[f64],
    grad_stds: &mut [f64],
) {
    let n = stds.len();
    let Some(inv) = SigmaInverse::new(stds, rho) else {
        return;
    };
    let mut v = upstream.to_vec();
    inv.solve(&mut v);
    // dL/dΣ_kl = -v_k c_l
    for i in 0..n {
        let mut g = -2.0 * stds[i] * v[i] * weights[i];
        for l in 0..n {
            if l != i {
                g -= rho * stds[l] * (v[i] * weights[l] + v[l] * weights[i]);
            }
        }
        grad_stds[i] += g;
    }
}

/// Consensus posterior and its per-dimension precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusResult {
    pub posterior: DiagonalGaussian,
    pub per_dim_precision: Vec<f64>,
}

impl ConsensusResult {
    fn from_moments(mean: Vec<f64>, precision: Vec<f64>) -> Result<Self> {
        let std = precision.iter().map(|p| (1.0 / p).sqrt()).collect();
        Ok(Self { posterior: DiagonalGaussian::new(mean, std)?, per_dim_precision: precision })
    }

    pub fn variance(&self) -> Vec<f64> {
        self.per_dim_precision.iter().map(|p| 1.0 / p).collect()
    }
}

fn check_experts(experts: &[DiagonalGaussian]) -> Result<usize> {
    let Some(first) = experts.first() else {
        return arg_err("at least one expert is required");
    };
    let dim = first.dim();
    if let Some(i) = experts.iter().position(|e| e.dim() != dim) {
        return arg_err(format!("expert {i} has dimension {} but expert 0 has {dim}", experts[i].dim()));
    }
    Ok(dim)
}

/// Consensus of dependent experts, computed one latent dimension at a time.
pub fn code_consensus(experts: &[DiagonalGaussian], spec: CorrelationSpec) -> Result<ConsensusResult> {
    let dim = check_experts(experts)?;
    let mut mean = Vec::with_capacity(dim);
    let mut precision = Vec::with_capacity(dim);
    let mut stds = vec![0.0; experts.len()];
    for d in 0..dim {
        for (s, e) in stds.iter_mut().zip(experts) {
            *s = e.std()[d];
        }
        let c = precision_weights(&stds, spec.rho()).ok_or(Error::NotPositiveDefinite { dim: d })?;
        let a: f64 = c.iter().sum();
        if !(a > 0.0) {
            return Err(Error::NotPositiveDefinite { dim: d });
        }
        let b: f64 = c.iter().zip(experts).map(|(w, e)| w * e.mean()[d]).sum();
        mean.push(b / a);
        precision.push(a);
    }
    ConsensusResult::from_moments(mean, precision)
}

/// Product of experts: precision-weighted average with summed precisions.
pub fn poe_consensus(experts: &[DiagonalGaussian]) -> Result<ConsensusResult> {
    let dim = check_experts(experts)?;
    let mut mean = Vec::with_capacity(dim);
    let mut precision = Vec::with_capacity(dim);
    for d in 0..dim {
        let (mut tau, mut weighted) = (0.0, 0.0);
        for e in experts {
            let t = 1.0 / (e.std()[d] * e.std()[d]);
            tau += t;
            weighted += t * e.mean()[d];
        }
        mean.push(weighted / tau);
        precision.push(tau);
    }
    ConsensusResult::from_moments(mean, precision)
}

/// Density at `z` of the equal-weight mixture of the experts.
pub fn moe_density(experts: &[DiagonalGaussian], z: &[f64]) -> Result<f64> {
    let dim = check_experts(experts)?;
    if z.len() != dim {
        return arg_err(format!("point has length {} but experts have dimension {dim}", z.len()));
    }
    let total: f64 = experts.iter().map(|e| e.log_pdf(z).exp()).sum();
    Ok(total / experts.len() as f64)
}

/// Draws from the equal-weight mixture: a uniform component, then a
/// reparameterized sample of it.
pub fn moe_sample<R: Rng + ?Sized>(experts: &[DiagonalGaussian], rng: &mut R) -> Result<Vec<f64>> {
    check_experts(experts)?;
    let e = &experts[rng.random_range(0..experts.len())];
    Ok(e.mean()
        .iter()
        .zip(e.std())
        .map(|(m, s)| {
            let eps: f64 = rng.sample(StandardNormal);
            m + s * eps
        })
        .collect())
}

/// Closed-form two-expert consensus weights and variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WinklerWeights {
    pub w1: f64,
    pub w2: f64,
    pub variance: f64,
}

pub fn winkler_two_expert(mu1: f64, sd1: f64, mu2: f64, sd2: f64, rho: f64) -> Result<WinklerWeights> {
    // The means do not enter the weights; they are accepted so callers can
    // pass an expert pair as-is.
    let _ = (mu1, mu2);
    if !(sd1 > 0.0 && sd2 > 0.0) {
        return arg_err("standard deviations must be positive");
    }
    if !(rho.abs() < 1.0) {
        return arg_err(format!("|rho| = {} must be below 1", rho.abs()));
    }
    let cross = rho * sd1 * sd2;
    let denom = sd1 * sd1 + sd2 * sd2 - 2.0 * cross;
    if !(denom > 0.0) {
        return arg_err("weight denominator is not positive");
    }
    let w1 = (sd2 * sd2 - cross) / denom;
    let w2 = (sd1 * sd1 - cross) / denom;
    let variance = (1.0 - rho * rho) * sd1 * sd1 * sd2 * sd2 / denom;
    Ok(WinklerWeights { w1, w2, variance })
}

/// Dense reference for [`code_consensus`].
///
/// Builds the full block-diagonal covariance over all `M′·D` expert
/// estimates (ordered by latent dimension, then expert) and the stacked-ones
/// design matrix `u`, then evaluates `A = uᵀΣ⁻¹u`, `B = uᵀΣ⁻¹μ` and the
/// posterior `N(A⁻¹B, A⁻¹)` with a general LU inverse.
pub fn code_consensus_oracle(experts: &[DiagonalGaussian], spec: CorrelationSpec) -> Result<ConsensusResult> {
    let (a, b) = oracle_precision_system(experts, spec)?;
    let dim = a.nrows();
    let a_inv = a.clone().try_inverse().ok_or_else(|| Error::Argument("oracle precision matrix is singular".into()))?;
    let mean = &a_inv * &b;
    let precision: Vec<f64> = (0..dim).map(|d| 1.0 / a_inv[(d, d)]).collect();
    ConsensusResult::from_moments(mean.iter().copied().collect(), precision)
}

/// The oracle's `A` and `B` before inversion.
pub fn oracle_precision_system(
    experts: &[DiagonalGaussian],
    spec: CorrelationSpec,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let dim = check_experts(experts)?;
    let m = experts.len();
    let n = m * dim;
    if n > ORACLE_MAX_SIZE {
        return arg_err(format!("oracle size M'·D = {n} exceeds {ORACLE_MAX_SIZE}"));
    }
    let rho = spec.rho();
    let mut sigma = DMatrix::<f64>::zeros(n, n);
    let mut u = DMatrix::<f64>::zeros(n, dim);
    let mut mu = DMatrix::<f64>::zeros(n, 1);
    for d in 0..dim {
        for i in 0..m {
            let row = d * m + i;
            u[(row, d)] = 1.0;
            mu[(row, 0)] = experts[i].mean()[d];
            for j in 0..m {
                let (si, sj) = (experts[i].std()[d], experts[j].std()[d]);
                sigma[(row, d * m + j)] = if i == j { si * si } else { rho * si * sj };
            }
        }
    }
    let sigma_inv = sigma.try_inverse().ok_or_else(|| Error::Argument("oracle covariance is singular".into()))?;
    let ut_sinv = u.transpose() * sigma_inv;
    Ok((&ut_sinv * &u, &ut_sinv * &mu))
}
