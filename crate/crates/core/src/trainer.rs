//! Minibatch training over every modality subset.
//!
//! Per minibatch: one noise draw shared by all subsets, one encoder pass per
//! modality, consensus posteriors for every subset, the subset-weighted
//! objective, and one Adam ascent step on all parameters (the subset-weight
//! logits are frozen when `π` is fixed to uniform).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{AdamState, Matrix, Tape};
use crate::config::{PiMode, TrainConfig};
use crate::data::MultimodalDataset;
use crate::error::{Error, Result};
use crate::gaussian::CorrelationSpec;
use crate::model::{Architecture, CodeVae, ObjectiveSettings};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Objective on the training rows before the first update.
    pub initial_objective: f64,
    /// Mean minibatch objective per epoch.
    pub objective_trace: Vec<f64>,
    pub final_pi: Vec<f64>,
    /// Mean `Σ_d var_d` of each subset posterior over the held-out rows.
    pub subset_traces: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
    pub wall_seconds: f64,
    pub steps: u64,
    pub encoder_calls_per_batch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CodeVae,
    pub report: TrainReport,
}

fn settings(config: &TrainConfig) -> ObjectiveSettings {
    ObjectiveSettings { beta: config.beta, entropy_scale: config.entropy_scale, placement: config.placement() }
}

fn noise(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// Mean objective over `data` in batches, without updating anything.
pub fn evaluate_objective(
    model: &CodeVae,
    config: &TrainConfig,
    data: &MultimodalDataset,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut total = 0.0;
    let mut batches = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(config.batch_size) {
        let batch = data.select_rows(chunk);
        let eps = noise(rng, chunk.len(), config.latent_dim);
        let mut tape = Tape::new();
        let graph = model.build_objective(&mut tape, &batch, &eps, settings(config))?;
        total += tape.value(graph.objective).get(0, 0);
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Mean trace of every subset posterior over `rows`.
pub fn subset_traces(model: &CodeVae, rows: &MultimodalDataset) -> Result<Vec<f64>> {
    let encoded = model.encode(rows)?;
    model
        .subsets()
        .iter()
        .map(|mask| {
            let (_, std) = model.subset_posterior(&encoded, *mask)?;
            Ok(std.as_slice().iter().map(|s| s * s).sum::<f64>() / std.rows() as f64)
        })
        .collect()
}

fn checkpoint_entries(config: &TrainConfig, steps: u64) -> BTreeMap<String, String> {
    let mut e = BTreeMap::new();
    e.insert("seed".to_string(), config.seed.to_string());
    e.insert("step".to_string(), steps.to_string());
    e.insert("beta".to_string(), config.beta.to_string());
    e.insert("entropy_scale".to_string(), config.entropy_scale.to_string());
    e.insert("pi_mode".to_string(), config.pi_mode.to_string());
    e.insert("strict_eq4".to_string(), config.strict_eq4.to_string());
    e
}

/// Trains a fresh model on `train`.
///
/// The trace report uses up to `config.report_rows` rows of `heldout`
/// (or of `train` when none is given). When `checkpoint` is set the final
/// parameters are written there; on divergence the last parameters that
/// produced a finite epoch are written instead and an error is returned.
pub fn train(
    config: &TrainConfig,
    train: &MultimodalDataset,
    heldout: Option<&MultimodalDataset>,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    train.validate()?;
    if train.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let arch =
        Architecture::for_dataset(train, config.latent_dim, config.hidden.clone(), CorrelationSpec::new(config.rho)?);
    let mut model = CodeVae::new(arch, &mut rng)?;
    let mut adam = AdamState::new(config.learning_rate, &model.param_shapes());
    let pi_index = model.pi_param_index();

    // A breakdown here surfaces as divergence in the first epoch.
    let initial_objective = match evaluate_objective(&model, config, train, &mut rng) {
        Err(Error::NotPositiveDefinite { .. }) => f64::NAN,
        other => other?,
    };
    let mut trace = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut last_good = (model.clone(), 0);
    let mut encoder_calls = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = train.select_rows(chunk);
            let eps = noise(&mut rng, chunk.len(), config.latent_dim);
            let mut tape = Tape::new();
            let graph = match model.build_objective(&mut tape, &batch, &eps, settings(config)) {
                Err(Error::NotPositiveDefinite { .. }) => {
                    return diverged(&last_good, config, checkpoint, epoch + 1, f64::NAN);
                }
                other => other?,
            };
            encoder_calls = graph.encoder_calls;
            let value = tape.value(graph.objective).get(0, 0);
            if !value.is_finite() {
                return diverged(&last_good, config, checkpoint, epoch + 1, value);
            }
            let grads = tape.backward(graph.objective)?;
            let mut grads: Vec<Matrix> = graph
                .params
                .iter()
                .zip(model.param_shapes())
                .map(|(id, shape)| grads.get_or_zeros(*id, shape))
                .collect();
            if config.pi_mode == PiMode::Uniform {
                grads[pi_index] = Matrix::zeros(1, grads[pi_index].cols());
            }
            adam.step(&mut model.params_mut(), &grads, true)?;
            total += value;
            batches += 1;
        }
        let mean = total / batches as f64;
        if !mean.is_finite() || model.params().iter().any(|p| p.as_slice().iter().any(|v| !v.is_finite())) {
            return diverged(&last_good, config, checkpoint, epoch + 1, mean);
        }
        trace.push(mean);
        last_good = (model.clone(), adam.step_count());
    }

    let report_data = heldout.unwrap_or(train);
    let n = config.report_rows.min(report_data.len());
    let rows = report_data.select_rows(&(0..n).collect::<Vec<_>>());
    let subset_traces = subset_traces(&model, &rows)?;

    if let Some(path) = checkpoint {
        model.save(path, &checkpoint_entries(config, adam.step_count()))?;
    }
    let report = TrainReport {
        initial_objective,
        objective_trace: trace,
        final_pi: model.pi(),
        subset_traces,
        checkpoint: checkpoint.map(Path::to_path_buf),
        wall_seconds: start.elapsed().as_secs_f64(),
        steps: adam.step_count(),
        encoder_calls_per_batch: encoder_calls,
    };
    Ok(TrainOutcome { model, report })
}

fn diverged(
    (last_good, steps): &(CodeVae, u64),
    config: &TrainConfig,
    checkpoint: Option<&Path>,
    epoch: usize,
    value: f64,
) -> Result<TrainOutcome> {
    if let Some(path) = checkpoint {
        last_good.save(path, &checkpoint_entries(config, *steps))?;
    }
    Err(Error::Diverged { epoch, value })
}
