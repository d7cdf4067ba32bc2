//! Randomized agreement check between the per-dimension consensus, the
//! dense oracle, and the product of experts at ρ = 0.

use codevae::consensus::{code_consensus, code_consensus_oracle, poe_consensus, ORACLE_MAX_SIZE};
use codevae::{CorrelationSpec, DiagonalGaussian, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ORACLE_TOL: f64 = 1e-6;
pub const POE_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct Instance {
    pub seed: u64,
    pub experts: Vec<DiagonalGaussian>,
    pub rho: f64,
}

impl Instance {
    pub fn describe(&self) -> String {
        format!("seed={} M'={} D={} rho={}", self.seed, self.experts.len(), self.experts[0].dim(), self.rho)
    }
}

/// Random experts with `M′` in `experts` and `D` in `dims`, capped so that
/// `M′·D` fits the oracle.
pub fn random_instance(seed: u64, experts: (usize, usize), dims: (usize, usize), rho: Option<f64>) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(experts.0..=experts.1);
    let max_d = dims.1.min(ORACLE_MAX_SIZE / m).max(dims.0);
    let d = rng.random_range(dims.0..=max_d);
    let rho = rho.unwrap_or_else(|| rng.random_range(0.0..=0.95));
    let experts = (0..m)
        .map(|_| {
            let mean = (0..d).map(|_| rng.random_range(-10.0..=10.0)).collect();
            let std = (0..d).map(|_| rng.random_range(0.1f64.ln()..=5f64.ln()).exp()).collect();
            DiagonalGaussian::new(mean, std)
        })
        .collect::<Result<_>>()?;
    Ok(Instance { seed, experts, rho })
}

/// Error relative to `max(|reference|, 1)`, the larger of mean and variance.
pub fn moment_error(a: &codevae::consensus::ConsensusResult, b: &codevae::consensus::ConsensusResult) -> f64 {
    let rel = |x: f64, y: f64| (x - y).abs() / y.abs().max(1.0);
    let means = a.posterior.mean().iter().zip(b.posterior.mean()).map(|(x, y)| rel(*x, *y));
    let vars = a.variance().into_iter().zip(b.variance()).map(|(x, y)| rel(x, y));
    means.chain(vars).fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct CheckSummary {
    pub max_oracle_error: f64,
    pub max_poe_error: f64,
    pub failure: Option<String>,
}

/// Runs `trials` oracle comparisons and `trials` PoE comparisons.
///
/// `flip_sign` negates the fast-path means before comparison, as a
/// negative control for the checker itself.
pub fn run(trials: usize, seed: u64, flip_sign: bool) -> Result<CheckSummary> {
    let mut summary = CheckSummary { max_oracle_error: 0.0, max_poe_error: 0.0, failure: None };
    for t in 0..trials as u64 {
        let inst = random_instance(seed.wrapping_mul(1_000_003).wrapping_add(t), (1, 8), (1, 8), None)?;
        let spec = CorrelationSpec::new(inst.rho)?;
        let mut fast = code_consensus(&inst.experts, spec)?;
        if flip_sign {
            let mean: Vec<f64> = fast.posterior.mean().iter().map(|m| -m).collect();
            fast.posterior = DiagonalGaussian::new(mean, fast.posterior.std().to_vec())?;
        }
        let err = moment_error(&fast, &code_consensus_oracle(&inst.experts, spec)?);
        summary.max_oracle_error = summary.max_oracle_error.max(err);
        if (err.is_nan() || err >= ORACLE_TOL) && summary.failure.is_none() {
            summary.failure = Some(format!("oracle mismatch {err:e}: {}", inst.describe()));
        }

        let inst = random_instance(seed.wrapping_mul(1_000_003).wrapping_add(t) ^ 0x5eed, (2, 4), (1, 8), Some(0.0))?;
        let fast = code_consensus(&inst.experts, CorrelationSpec::independent())?;
        let err = moment_error(&fast, &poe_consensus(&inst.experts)?);
        summary.max_poe_error = summary.max_poe_error.max(err);
        if (err.is_nan() || err >= POE_TOL) && summary.failure.is_none() {
            summary.failure = Some(format!("PoE mismatch {err:e}: {}", inst.describe()));
        }
    }
    Ok(summary)
}
