//! β/ρ grid search over independent training runs.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::TrainConfig;
use crate::data::{ModalityData, MultimodalDataset};
use crate::error::{arg_err, Error, Result};
use crate::eval::{latent_classifier_accuracy, prior_frechet, reconstruction_mse, subset_elbo_rows};
use crate::model::CodeVae;
use crate::trainer::train;

/// Held-out score used to rank grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelectionMetric {
    /// Mean subset ELBO over all subsets (higher wins).
    #[default]
    Elbo,
    /// Mean reconstruction MSE of every real modality from a posterior draw
    /// of every subset (lower wins).
    Reconstruction,
    /// Mean latent-classifier accuracy over all subsets (higher wins).
    Accuracy,
    /// Fréchet distance of prior samples of modality 0 to the data (lower
    /// wins).
    Generative,
}

impl SelectionMetric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "elbo" => Ok(Self::Elbo),
            "reconstruction" | "recon" => Ok(Self::Reconstruction),
            "accuracy" => Ok(Self::Accuracy),
            "generative" | "frechet" => Ok(Self::Generative),
            _ => arg_err(format!("unknown metric {s:?}")),
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, Self::Reconstruction | Self::Generative)
    }

    /// Scores `model` on `heldout`; classifiers are fit on `train`.
    pub fn score(
        self,
        model: &CodeVae,
        train: &MultimodalDataset,
        heldout: &MultimodalDataset,
        seed: u64,
    ) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let subsets = model.subsets();
        let mut total = 0.0;
        match self {
            Self::Elbo => {
                let encoded = model.encode(heldout)?;
                for mask in subsets {
                    let rows = subset_elbo_rows(model, heldout, &encoded, *mask, 1, &mut rng)?;
                    total += rows.iter().sum::<f64>() / rows.len() as f64;
                }
                Ok(total / subsets.len() as f64)
            }
            Self::Reconstruction => {
                let encoded = model.encode(heldout)?;
                let real: Vec<usize> = (0..heldout.modality_count())
                    .filter(|m| matches!(heldout.modalities[*m], ModalityData::Real(_)))
                    .collect();
                if real.is_empty() {
                    return arg_err("reconstruction metric needs a real-valued modality");
                }
                for mask in subsets {
                    for m in &real {
                        total += reconstruction_mse(model, heldout, &encoded, *mask, *m, 1, &mut rng)?;
                    }
                }
                Ok(total / (subsets.len() * real.len()) as f64)
            }
            Self::Accuracy => {
                for mask in subsets {
                    total += latent_classifier_accuracy(model, train, heldout, *mask, false, &mut rng)?;
                }
                Ok(total / subsets.len() as f64)
            }
            Self::Generative => prior_frechet(model, heldout, 0, &mut rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub beta: f64,
    pub rho: f64,
    pub seed: u64,
    /// `None` when training or scoring failed.
    pub metric: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub metric: SelectionMetric,
    /// Row-major over the β grid, then the ρ grid.
    pub cells: Vec<GridCell>,
    pub best: Option<usize>,
}

impl GridResult {
    pub fn best_cell(&self) -> Option<&GridCell> {
        self.best.map(|i| &self.cells[i])
    }

    pub fn cell(&self, beta: f64, rho: f64) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.beta == beta && c.rho == rho)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["beta", "rho", "seed", "metric", "status"])?;
        for c in &self.cells {
            let metric = c.metric.map(|m| m.to_string()).unwrap_or_else(|| "nan".into());
            w.write_record([c.beta.to_string(), c.rho.to_string(), c.seed.to_string(), metric, c.status.clone()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn run_cell(
    template: &TrainConfig,
    beta: f64,
    rho: f64,
    train_set: &MultimodalDataset,
    heldout: &MultimodalDataset,
    metric: SelectionMetric,
) -> GridCell {
    let config = TrainConfig { beta, rho, ..template.clone() };
    let scored = train(&config, train_set, Some(heldout), None)
        .and_then(|out| metric.score(&out.model, train_set, heldout, config.seed));
    let (metric, status) = match scored {
        Ok(v) if v.is_finite() => (Some(v), "ok".to_string()),
        Ok(v) => (None, format!("failed: non-finite metric {v}")),
        Err(Error::Diverged { epoch, .. }) => (None, format!("failed: diverged at epoch {epoch}")),
        Err(e) => (None, format!("failed: {e}")),
    };
    GridCell { beta, rho, seed: template.seed, metric, status }
}

/// Trains one model per (β, ρ) cell with the template's seed and ranks the
/// cells by `metric` on `heldout`.
///
/// Failed cells are reported, not fatal. Ties go to the smaller ρ, then the
/// smaller β. `jobs` bounds the number of cells trained at once.
pub fn grid_search(
    template: &TrainConfig,
    betas: &[f64],
    rhos: &[f64],
    train_set: &MultimodalDataset,
    heldout: &MultimodalDataset,
    metric: SelectionMetric,
    jobs: usize,
) -> Result<GridResult> {
    if betas.is_empty() || rhos.is_empty() {
        return arg_err("grids must be non-empty");
    }
    for (b, r) in betas.iter().flat_map(|b| rhos.iter().map(move |r| (*b, *r))) {
        TrainConfig { beta: b, rho: r, ..template.clone() }.validate()?;
    }
    let pairs: Vec<(f64, f64)> = betas.iter().flat_map(|b| rhos.iter().map(move |r| (*b, *r))).collect();
    let cells: Vec<GridCell> = if jobs <= 1 {
        pairs.iter().map(|(b, r)| run_cell(template, *b, *r, train_set, heldout, metric)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Argument(format!("cannot start worker pool: {e}")))?;
        pool.install(|| pairs.par_iter().map(|(b, r)| run_cell(template, *b, *r, train_set, heldout, metric)).collect())
    };
    let best = select_best(&cells, metric);
    Ok(GridResult { metric, cells, best })
}

fn select_best(cells: &[GridCell], metric: SelectionMetric) -> Option<usize> {
    let sign = if metric.higher_is_better() { 1.0 } else { -1.0 };
    let mut best: Option<usize> = None;
    for (i, c) in cells.iter().enumerate() {
        let Some(v) = c.metric else { continue };
        let better = match best {
            None => true,
            Some(j) => {
                let (b, bv) = (&cells[j], sign * cells[j].metric.unwrap_or(f64::NAN));
                let v = sign * v;
                v > bv || (v == bv && (c.rho, c.beta) < (b.rho, b.beta))
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}
