//! Evaluation of trained models: subset ELBOs, reconstruction error, latent
//! classification, the π/trace report and the four-way ablation.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Matrix;
use crate::config::{PiMode, TrainConfig};
use crate::data::{ModalityData, MultimodalDataset};
use crate::elbo::{recon_log_lik, LikelihoodSpec};
use crate::error::{arg_err, Error, Result};
use crate::gaussian::SubsetMask;
use crate::grid::{grid_search, SelectionMetric};
use crate::model::{CodeVae, Encoded};
use crate::trainer::{subset_traces, train};

/// Iteration cap of the softmax-regression fit.
pub const CLASSIFIER_MAX_ITER: usize = 3000;
/// Latents used to fit each classifier.
pub const CLASSIFIER_TRAIN_ROWS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    /// Standard error of `mean` across rows.
    pub std_err: f64,
}

fn estimate(values: &[f64]) -> Estimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Estimate { mean, std_err: (var / n).sqrt() }
}

fn sample_latent<R: Rng + ?Sized>(mean: &Matrix, std: &Matrix, rng: &mut R) -> Matrix {
    let data =
        mean.as_slice().iter().zip(std.as_slice()).map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_vec(mean.rows(), mean.cols(), data).expect("shape")
}

fn decode_all(model: &CodeVae, z: &Matrix) -> Result<Vec<Matrix>> {
    (0..model.architecture().modalities()).map(|m| model.decode(m, z)).collect()
}

/// Per-row subset ELBO `E_q(z|X_k)[log p(X|z)] - KL[q(z|X_k) || p(z)]`
/// with an unweighted reconstruction over every modality.
pub fn subset_elbo_rows<R: Rng + ?Sized>(
    model: &CodeVae,
    batch: &MultimodalDataset,
    encoded: &Encoded,
    mask: SubsetMask,
    samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if samples == 0 {
        return arg_err("samples must be at least 1");
    }
    let families = model.likelihood().families().to_vec();
    let spec = LikelihoodSpec::with_weights(families.clone(), vec![1.0; families.len()])?;
    let (mean, std) = model.subset_posterior(encoded, mask)?;
    let mut rows = vec![0.0; batch.len()];
    for _ in 0..samples {
        let z = sample_latent(&mean, &std, rng);
        let ll = recon_log_lik(&spec, &decode_all(model, &z)?, &batch.modalities)?;
        for (r, v) in rows.iter_mut().zip(ll) {
            *r += v / samples as f64;
        }
    }
    for (r, out) in rows.iter_mut().enumerate() {
        let kl: f64 = mean.row(r).iter().zip(std.row(r)).map(|(m, s)| 0.5 * (s * s + m * m - 1.0) - s.ln()).sum();
        *out -= kl;
    }
    Ok(rows)
}

/// Monte Carlo subset ELBO averaged over the rows of `batch`.
pub fn subset_elbo<R: Rng + ?Sized>(
    model: &CodeVae,
    batch: &MultimodalDataset,
    mask: SubsetMask,
    samples: usize,
    rng: &mut R,
) -> Result<Estimate> {
    let encoded = model.encode(batch)?;
    Ok(estimate(&subset_elbo_rows(model, batch, &encoded, mask, samples, rng)?))
}

/// Mean squared error of reconstructing real modality `target` from the
/// posterior of `mask`. With `samples == 0` the posterior mean is decoded;
/// otherwise the error is averaged over `samples` posterior draws.
pub fn reconstruction_mse<R: Rng + ?Sized>(
    model: &CodeVae,
    batch: &MultimodalDataset,
    encoded: &Encoded,
    mask: SubsetMask,
    target: usize,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let x = match batch.modalities.get(target) {
        Some(ModalityData::Real(x)) => x,
        Some(ModalityData::Categorical(_)) => return arg_err(format!("modality {target} is categorical")),
        None => return arg_err(format!("no modality {target}")),
    };
    let (mean, std) = model.subset_posterior(encoded, mask)?;
    let mse = |z: &Matrix| -> Result<f64> {
        let out = model.decode(target, z)?;
        Ok(out.as_slice().iter().zip(x.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64)
    };
    if samples == 0 {
        return mse(&mean);
    }
    let mut total = 0.0;
    for _ in 0..samples {
        total += mse(&sample_latent(&mean, &std, rng))?;
    }
    Ok(total / samples as f64)
}

fn moments(x: &Matrix) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.shape();
    let data = DMatrix::from_row_slice(n, d, x.as_slice());
    let mean = data.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |r, c| data[(r, c)] - mean[c]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

fn sqrt_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let e = a.clone().symmetric_eigen();
    let root = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * root * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to the rows of `a` and `b`:
/// `|μa - μb|² + tr(Σa + Σb - 2 (Σa^½ Σb Σa^½)^½)`.
pub fn frechet_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.cols() != b.cols() || a.rows() < 2 || b.rows() < 2 {
        return arg_err("Fréchet distance needs two samples of equal width with at least two rows");
    }
    let (ma, sa) = moments(a);
    let (mb, sb) = moments(b);
    let ra = sqrt_psd(&sa);
    let cross = sqrt_psd(&(&ra * sb.clone() * &ra));
    Ok((ma - mb).norm_squared() + sa.trace() + sb.trace() - 2.0 * cross.trace())
}

/// Generative quality of real modality `target`: Fréchet distance between
/// decodes of prior draws `z ~ N(0, I)` and the observed rows of `batch`.
pub fn prior_frechet<R: Rng + ?Sized>(
    model: &CodeVae,
    batch: &MultimodalDataset,
    target: usize,
    rng: &mut R,
) -> Result<f64> {
    let x = match batch.modalities.get(target) {
        Some(ModalityData::Real(x)) => x,
        _ => return arg_err(format!("modality {target} is not real-valued")),
    };
    let d = model.architecture().latent_dim;
    let z = Matrix::from_vec(x.rows(), d, (0..x.rows() * d).map(|_| rng.sample(StandardNormal)).collect())?;
    frechet_distance(&model.decode(target, &z)?, x)
}

/// Multinomial logistic regression fit by full-batch gradient descent on
/// standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxRegression {
    feature_mean: Vec<f64>,
    feature_scale: Vec<f64>,
    /// `features x classes`.
    weights: Matrix,
    bias: Vec<f64>,
    pub iterations: usize,
}

impl SoftmaxRegression {
    pub fn fit(features: &Matrix, labels: &[usize], classes: usize) -> Result<Self> {
        let (n, f) = features.shape();
        if n == 0 || n != labels.len() {
            return arg_err("classifier needs one label per feature row");
        }
        if classes < 2 || labels.iter().any(|l| *l >= classes) {
            return arg_err("labels outside the class range");
        }
        if labels.iter().all(|l| *l == labels[0]) {
            return Err(Error::Evaluation("training split contains a single class".into()));
        }
        let mut feature_mean = vec![0.0; f];
        let mut feature_scale = vec![0.0; f];
        for r in 0..n {
            for (c, v) in features.row(r).iter().enumerate() {
                feature_mean[c] += v / n as f64;
            }
        }
        for r in 0..n {
            for (c, v) in features.row(r).iter().enumerate() {
                feature_scale[c] += (v - feature_mean[c]).powi(2) / n as f64;
            }
        }
        for s in &mut feature_scale {
            *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
        }
        let mut model = Self {
            feature_mean,
            feature_scale,
            weights: Matrix::zeros(f, classes),
            bias: vec![0.0; classes],
            iterations: 0,
        };
        let x = model.standardize(features);
        let xt = x.transpose();
        let lr = 1.0;
        let mut probs = Matrix::zeros(n, classes);
        for it in 0..CLASSIFIER_MAX_ITER {
            model.probabilities_into(&x, &mut probs);
            for (r, l) in labels.iter().enumerate() {
                let v = probs.get(r, *l);
                probs.set(r, *l, v - 1.0);
            }
            let gw = xt.matmul(&probs)?;
            let mut gnorm = 0.0;
            for (w, g) in model.weights.as_mut_slice().iter_mut().zip(gw.as_slice()) {
                let g = g / n as f64;
                gnorm += g * g;
                *w -= lr * g;
            }
            for c in 0..classes {
                let g = (0..n).map(|r| probs.get(r, c)).sum::<f64>() / n as f64;
                gnorm += g * g;
                model.bias[c] -= lr * g;
            }
            model.iterations = it + 1;
            if gnorm.sqrt() < 1e-6 {
                break;
            }
        }
        Ok(model)
    }

    fn standardize(&self, features: &Matrix) -> Matrix {
        let mut x = features.clone();
        for r in 0..x.rows() {
            for (c, v) in x.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.feature_mean[c]) / self.feature_scale[c];
            }
        }
        x
    }

    fn probabilities_into(&self, x: &Matrix, out: &mut Matrix) {
        let logits = x.matmul(&self.weights).expect("shape");
        for r in 0..x.rows() {
            let row: Vec<f64> = logits.row(r).iter().zip(&self.bias).map(|(l, b)| l + b).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (o, v) in out.row_mut(r).iter_mut().zip(&row) {
                *o = (v - max).exp() / total;
            }
        }
    }

    pub fn predict(&self, features: &Matrix) -> Vec<usize> {
        let x = self.standardize(features);
        let logits = x.matmul(&self.weights).expect("shape");
        (0..x.rows())
            .map(|r| {
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for (c, (l, b)) in logits.row(r).iter().zip(&self.bias).enumerate() {
                    if l + b > best_v {
                        best_v = l + b;
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    pub fn accuracy(&self, features: &Matrix, labels: &[usize]) -> f64 {
        let hits = self.predict(features).iter().zip(labels).filter(|(p, l)| p == l).count();
        hits as f64 / labels.len() as f64
    }
}

/// Fits a classifier on latents of the first [`CLASSIFIER_TRAIN_ROWS`] rows
/// of `train` and returns its accuracy on `test`.
///
/// Latents are posterior means unless `use_samples`, in which case one
/// posterior draw per row is used.
pub fn latent_classifier_accuracy<R: Rng + ?Sized>(
    model: &CodeVae,
    train: &MultimodalDataset,
    test: &MultimodalDataset,
    mask: SubsetMask,
    use_samples: bool,
    rng: &mut R,
) -> Result<f64> {
    let n = CLASSIFIER_TRAIN_ROWS.min(train.len());
    let train = train.select_rows(&(0..n).collect::<Vec<_>>());
    let fit_latents = latents(model, &model.encode(&train)?, mask, use_samples, rng)?;
    let test_latents = latents(model, &model.encode(test)?, mask, use_samples, rng)?;
    latent_accuracy(&fit_latents, &train.labels, &test_latents, &test.labels, train.classes)
}

fn latents<R: Rng + ?Sized>(
    model: &CodeVae,
    encoded: &Encoded,
    mask: SubsetMask,
    use_samples: bool,
    rng: &mut R,
) -> Result<Matrix> {
    let (mean, std) = model.subset_posterior(encoded, mask)?;
    Ok(if use_samples { sample_latent(&mean, &std, rng) } else { mean })
}

/// Accuracy of a softmax regression fit on `(fit, fit_labels)` evaluated on
/// `(test, test_labels)`.
pub fn latent_accuracy(
    fit: &Matrix,
    fit_labels: &[usize],
    test: &Matrix,
    test_labels: &[usize],
    classes: usize,
) -> Result<f64> {
    if test.rows() == 0 || test.rows() != test_labels.len() {
        return arg_err("test split needs one label per row");
    }
    Ok(SoftmaxRegression::fit(fit, fit_labels, classes)?.accuracy(test, test_labels))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CardinalityRow {
    pub cardinality: usize,
    pub subsets: usize,
    pub mean_pi: f64,
    pub mean_trace: f64,
}

/// Mean `π_k` and mean posterior trace grouped by subset cardinality.
pub fn pi_trace_report(model: &CodeVae, batch: &MultimodalDataset) -> Result<Vec<CardinalityRow>> {
    let traces = subset_traces(model, batch)?;
    Ok(group_by_cardinality(model.subsets(), &[model.pi(), traces])
        .into_iter()
        .map(|(cardinality, subsets, means)| CardinalityRow {
            cardinality,
            subsets,
            mean_pi: means[0],
            mean_trace: means[1],
        })
        .collect())
}

/// `(cardinality, count, per-column means)` for every cardinality present.
fn group_by_cardinality(masks: &[SubsetMask], columns: &[Vec<f64>]) -> Vec<(usize, usize, Vec<f64>)> {
    let max = masks.iter().map(|m| m.cardinality()).max().unwrap_or(0);
    (1..=max)
        .filter_map(|c| {
            let idx: Vec<usize> = (0..masks.len()).filter(|k| masks[*k].cardinality() == c).collect();
            if idx.is_empty() {
                return None;
            }
            let means = columns.iter().map(|col| idx.iter().map(|k| col[*k]).sum::<f64>() / idx.len() as f64).collect();
            Some((c, idx.len(), means))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub samples: usize,
    pub use_samples: bool,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { samples: 8, use_samples: false, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetEval {
    pub mask: SubsetMask,
    pub elbo: Estimate,
    pub accuracy: f64,
    pub pi: f64,
    pub trace: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CardinalityEval {
    pub cardinality: usize,
    pub subsets: usize,
    pub elbo: f64,
    pub accuracy: f64,
    pub pi: f64,
    pub trace: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub subsets: Vec<SubsetEval>,
    pub cardinality: Vec<CardinalityEval>,
}

impl EvalReport {
    pub fn mean_elbo(&self) -> f64 {
        self.subsets.iter().map(|s| s.elbo.mean).sum::<f64>() / self.subsets.len() as f64
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.subsets.iter().map(|s| s.accuracy).sum::<f64>() / self.subsets.len() as f64
    }
}

/// Every per-subset quantity on `test`, with classifiers fit on `train`.
pub fn evaluate(
    model: &CodeVae,
    train: &MultimodalDataset,
    test: &MultimodalDataset,
    options: EvalOptions,
) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let encoded = model.encode(test)?;
    let traces = subset_traces(model, test)?;
    let pi = model.pi();
    let mut subsets = Vec::with_capacity(model.subsets().len());
    for (k, mask) in model.subsets().iter().enumerate() {
        let elbo = estimate(&subset_elbo_rows(model, test, &encoded, *mask, options.samples, &mut rng)?);
        let accuracy = latent_classifier_accuracy(model, train, test, *mask, options.use_samples, &mut rng)?;
        subsets.push(SubsetEval { mask: *mask, elbo, accuracy, pi: pi[k], trace: traces[k] });
    }
    let columns =
        [subsets.iter().map(|s| s.elbo.mean).collect(), subsets.iter().map(|s| s.accuracy).collect(), pi, traces];
    let cardinality = group_by_cardinality(model.subsets(), &columns)
        .into_iter()
        .map(|(cardinality, n, m)| CardinalityEval {
            cardinality,
            subsets: n,
            elbo: m[0],
            accuracy: m[1],
            pi: m[2],
            trace: m[3],
        })
        .collect();
    Ok(EvalReport { subsets, cardinality })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub pi_mode: PiMode,
    pub rho: f64,
    pub elbo: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    /// ρ picked by the held-out ELBO among `rho_grid` with learned `π`.
    pub rho_star: f64,
    pub rows: Vec<AblationRow>,
}

/// Trains the four variants {learned, uniform π} x {ρ*, ρ = 0} with the
/// seed of `base` and reports mean subset ELBO and classifier accuracy on
/// `heldout`.
pub fn ablation_compare(
    base: &TrainConfig,
    rho_grid: &[f64],
    train_set: &MultimodalDataset,
    heldout: &MultimodalDataset,
    options: EvalOptions,
) -> Result<Ablation> {
    let learned = TrainConfig { pi_mode: PiMode::Learned, ..base.clone() };
    let grid = grid_search(&learned, &[base.beta], rho_grid, train_set, heldout, SelectionMetric::Elbo, 1)?;
    let rho_star = grid.best_cell().map(|c| c.rho).ok_or_else(|| Error::Evaluation("every ρ cell failed".into()))?;
    let variants = [
        ("learned_pi_rho_star", PiMode::Learned, rho_star),
        ("learned_pi_rho_zero", PiMode::Learned, 0.0),
        ("equal_pi_rho_star", PiMode::Uniform, rho_star),
        ("equal_pi_rho_zero", PiMode::Uniform, 0.0),
    ];
    let mut rows = Vec::with_capacity(variants.len());
    for (name, pi_mode, rho) in variants {
        let config = TrainConfig { pi_mode, rho, ..base.clone() };
        let outcome = train(&config, train_set, Some(heldout), None)?;
        let report = evaluate(&outcome.model, train_set, heldout, options)?;
        rows.push(AblationRow {
            variant: name.to_string(),
            pi_mode,
            rho,
            elbo: report.mean_elbo(),
            accuracy: report.mean_accuracy(),
        });
    }
    Ok(Ablation { rho_star, rows })
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

/// `epoch,objective`, one row per epoch.
pub fn write_trace_csv(path: &Path, trace: &[f64]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["epoch", "objective"])?;
    for (e, v) in trace.iter().enumerate() {
        w.write_record([(e + 1).to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `subset,cardinality,pi,trace`, one row per subset.
pub fn write_subset_pi_csv(path: &Path, masks: &[SubsetMask], pi: &[f64], traces: &[f64]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["subset", "cardinality", "pi", "trace"])?;
    for ((m, p), t) in masks.iter().zip(pi).zip(traces) {
        w.write_record([m.label(), m.cardinality().to_string(), p.to_string(), t.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_pi_trace_csv(path: &Path, rows: &[CardinalityRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["cardinality", "subsets", "mean_pi", "mean_trace"])?;
    for r in rows {
        w.write_record([
            r.cardinality.to_string(),
            r.subsets.to_string(),
            r.mean_pi.to_string(),
            r.mean_trace.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the per-subset and per-cardinality tables of `report`.
pub fn write_eval_csv(subset_path: &Path, cardinality_path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = writer(subset_path)?;
    w.write_record(["subset", "cardinality", "elbo", "elbo_se", "accuracy", "pi", "trace"])?;
    for s in &report.subsets {
        w.write_record([
            s.mask.label(),
            s.mask.cardinality().to_string(),
            s.elbo.mean.to_string(),
            s.elbo.std_err.to_string(),
            s.accuracy.to_string(),
            s.pi.to_string(),
            s.trace.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = writer(cardinality_path)?;
    w.write_record(["cardinality", "subsets", "elbo", "accuracy", "pi", "trace"])?;
    for c in &report.cardinality {
        w.write_record([
            c.cardinality.to_string(),
            c.subsets.to_string(),
            c.elbo.to_string(),
            c.accuracy.to_string(),
            c.pi.to_string(),
            c.trace.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ablation_csv(path: &Path, ablation: &Ablation) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["variant", "pi_mode", "rho", "elbo", "accuracy"])?;
    for r in &ablation.rows {
        w.write_record([
            r.variant.clone(),
            r.pi_mode.to_string(),
            r.rho.to_string(),
            r.elbo.to_string(),
            r.accuracy.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
