//! `codevae`: toy example, consensus checks, data generation, training,
//! grid search, evaluation and ablations.
//!
//! Exit codes: 0 on success, 1 on a numerical or check failure, 2 on usage
//! or I/O errors.

mod check;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use codevae::autodiff::parse_key_values;
use codevae::config::{PiMode, TrainConfig};
use codevae::consensus::{code_consensus, poe_consensus, winkler_two_expert};
use codevae::data::{self, MultimodalDataset, SyntheticSpec};
use codevae::eval::{self, EvalOptions};
use codevae::grid::{grid_search, SelectionMetric};
use codevae::model::CodeVae;
use codevae::trainer::train;
use codevae::{CorrelationSpec, DiagonalGaussian, Error};

const TRAIN_FILE: &str = "train.codemm";
const HELDOUT_FILE: &str = "heldout.codemm";
const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Parser)]
#[command(name = "codevae", version, about = "Consensus of dependent experts for multimodal VAEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the two-expert toy consensus under CoDE, PoE and MoE.
    Toy {
        #[arg(long, default_value_t = 0.6)]
        rho: f64,
    },
    /// Compare the fast consensus against the dense oracle and PoE.
    ConsensusCheck {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negates the fast-path means; the check must then fail.
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
    /// Write a synthetic train/held-out pair.
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint and traces.
    Train {
        #[command(flatten)]
        io: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Train one model per (β, ρ) cell and rank them on held-out data.
    Grid {
        #[command(flatten)]
        io: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.1,1,5,10,15,20")]
        betas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8")]
        rhos: Vec<f64>,
        /// elbo, reconstruction, accuracy or generative.
        #[arg(long, default_value = "elbo")]
        metric: String,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate a checkpoint on held-out data.
    Eval {
        #[command(flatten)]
        io: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        /// Feed posterior draws rather than means to the classifier.
        #[arg(long)]
        classifier_samples: bool,
    },
    /// Train the four π/ρ variants and compare them.
    Ablate {
        #[command(flatten)]
        io: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8")]
        rhos: Vec<f64>,
        #[arg(long, default_value_t = 8)]
        samples: usize,
    },
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    modalities: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    factor_dim: usize,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 1024)]
    rows: usize,
    #[arg(long, default_value_t = 512)]
    heldout_rows: usize,
    /// Make modality 1 a copy of modality 0 with this noise fraction
    /// (two modalities only).
    #[arg(long)]
    duplicate_fraction: Option<f64>,
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding the output of `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// `key=value` file; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    entropy_scale: Option<f64>,
    #[arg(long, value_parser = ["learned", "uniform"])]
    pi_mode: Option<String>,
    /// Weight only the reconstruction term by π; the KL term is unweighted.
    #[arg(long)]
    strict_eq4: bool,
}

impl TrainArgs {
    fn config(&self) -> codevae::Result<TrainConfig> {
        let mut c = TrainConfig::default();
        if let Some(path) = &self.config {
            c.apply(&parse_key_values(&fs::read_to_string(path)?)?)?;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.beta {
            c.beta = v;
        }
        if let Some(v) = self.rho {
            c.rho = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.batch {
            c.batch_size = v;
        }
        if let Some(v) = self.latent_dim {
            c.latent_dim = v;
        }
        if let Some(v) = &self.hidden {
            c.hidden = v.clone();
        }
        if let Some(v) = self.lr {
            c.learning_rate = v;
        }
        if let Some(v) = self.entropy_scale {
            c.entropy_scale = v;
        }
        if let Some(v) = &self.pi_mode {
            c.pi_mode = v.parse::<PiMode>()?;
        }
        if self.strict_eq4 {
            c.strict_eq4 = true;
        }
        c.validate()?;
        Ok(c)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NotPositiveDefinite { .. } | Error::Diverged { .. } | Error::Evaluation(_) => 1,
        _ => 2,
    }
}

fn run(command: Command) -> codevae::Result<ExitCode> {
    match command {
        Command::Toy { rho } => toy(rho),
        Command::ConsensusCheck { trials, seed, inject_sign_flip } => consensus_check(trials, seed, inject_sign_flip),
        Command::GenData(args) => gen_data(&args),
        Command::Train { io, train } => cmd_train(&io, &train.config()?),
        Command::Grid { io, train, betas, rhos, metric, jobs } => {
            cmd_grid(&io, &train.config()?, &betas, &rhos, SelectionMetric::parse(&metric)?, jobs)
        }
        Command::Eval { io, checkpoint, seed, samples, classifier_samples } => {
            cmd_eval(&io, &checkpoint, EvalOptions { samples, use_samples: classifier_samples, seed })
        }
        Command::Ablate { io, train, rhos, samples } => {
            let config = train.config()?;
            cmd_ablate(&io, &config, &rhos, EvalOptions { samples, use_samples: false, seed: config.seed })
        }
    }
}

fn toy(rho: f64) -> codevae::Result<ExitCode> {
    let spec = CorrelationSpec::new(rho)?;
    let experts = [DiagonalGaussian::new(vec![4.0], vec![3f64.sqrt()])?, DiagonalGaussian::new(vec![8.0], vec![1.0])?];
    let code = code_consensus(&experts, spec)?;
    let poe = poe_consensus(&experts)?;
    let w = winkler_two_expert(4.0, 3f64.sqrt(), 8.0, 1.0, rho)?;
    // Equal-weight mixture moments.
    let moe_mean = 0.5 * (4.0 + 8.0);
    let moe_var = 0.5 * (3.0 + 16.0) + 0.5 * (1.0 + 64.0) - moe_mean * moe_mean;
    println!("method,mean,variance");
    println!("code,{:.6},{:.6}", code.posterior.mean()[0], code.variance()[0]);
    println!("poe,{:.6},{:.6}", poe.posterior.mean()[0], poe.variance()[0]);
    println!("moe,{moe_mean:.6},{moe_var:.6}");
    println!("winkler weights: w1={:.6} w2={:.6} variance={:.6}", w.w1, w.w2, w.variance);
    Ok(ExitCode::SUCCESS)
}

fn consensus_check(trials: usize, seed: u64, flip: bool) -> codevae::Result<ExitCode> {
    if trials == 0 {
        return Err(Error::Argument("--trials must be at least 1".into()));
    }
    let s = check::run(trials, seed, flip)?;
    println!("trials={trials} max_oracle_error={:e} max_poe_error={:e}", s.max_oracle_error, s.max_poe_error);
    match s.failure {
        None => Ok(ExitCode::SUCCESS),
        Some(msg) => {
            eprintln!("FAIL {msg}");
            Ok(ExitCode::from(1))
        }
    }
}

fn gen_data(a: &GenDataArgs) -> codevae::Result<ExitCode> {
    let spec = match a.duplicate_fraction {
        Some(f) => {
            if a.modalities != 2 {
                return Err(Error::Argument("--duplicate-fraction needs --modalities 2".into()));
            }
            SyntheticSpec::duplicated(a.dim, a.factor_dim, a.noise, f)
        }
        None => SyntheticSpec::gaussian(a.modalities, a.dim, a.factor_dim, a.noise),
    };
    let all = data::generate(&spec, a.rows + a.heldout_rows, a.seed)?;
    let (train, heldout) = all.split(a.rows)?;
    fs::create_dir_all(&a.out)?;
    data::save(&train, &a.out.join(TRAIN_FILE))?;
    data::save(&heldout, &a.out.join(HELDOUT_FILE))?;
    println!("gen-data: {} train rows, {} held-out rows, dims {:?}", train.len(), heldout.len(), train.dims());
    Ok(ExitCode::SUCCESS)
}

fn load_pair(io: &DataArgs) -> codevae::Result<(MultimodalDataset, MultimodalDataset)> {
    let train = data::load(&io.data.join(TRAIN_FILE))?;
    let heldout = data::load(&io.data.join(HELDOUT_FILE))?;
    fs::create_dir_all(&io.out)?;
    Ok((train, heldout))
}

fn write_timing(out: &Path, seconds: f64) -> codevae::Result<()> {
    fs::write(out.join("timing.txt"), format!("wall_seconds={seconds:.3}\n"))?;
    Ok(())
}

fn cmd_train(io: &DataArgs, config: &TrainConfig) -> codevae::Result<ExitCode> {
    let (train_set, heldout) = load_pair(io)?;
    fs::write(io.out.join("config.txt"), codevae::autodiff::render_key_values(&config.to_entries()))?;
    let outcome = train(config, &train_set, Some(&heldout), Some(&io.out.join(CHECKPOINT_FILE)))?;
    let r = &outcome.report;
    eval::write_trace_csv(&io.out.join("trace.csv"), &r.objective_trace)?;
    eval::write_subset_pi_csv(&io.out.join("subsets.csv"), outcome.model.subsets(), &r.final_pi, &r.subset_traces)?;
    write_timing(&io.out, r.wall_seconds)?;
    let last = r.objective_trace.last().copied().unwrap_or(r.initial_objective);
    println!(
        "train: {} epochs, {} steps, objective {:.4} -> {:.4}, {:.1}s",
        r.objective_trace.len(),
        r.steps,
        r.initial_objective,
        last,
        r.wall_seconds
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_grid(
    io: &DataArgs,
    config: &TrainConfig,
    betas: &[f64],
    rhos: &[f64],
    metric: SelectionMetric,
    jobs: usize,
) -> codevae::Result<ExitCode> {
    let (train_set, heldout) = load_pair(io)?;
    let result = grid_search(config, betas, rhos, &train_set, &heldout, metric, jobs.max(1))?;
    result.write_csv(&io.out.join("grid.csv"))?;
    match result.best_cell() {
        Some(b) => {
            println!(
                "grid: {} cells, best beta={} rho={} metric={:.6}",
                result.cells.len(),
                b.beta,
                b.rho,
                b.metric.unwrap_or(f64::NAN)
            );
            Ok(ExitCode::SUCCESS)
        }
        None => {
            eprintln!("grid: every cell failed");
            Ok(ExitCode::from(1))
        }
    }
}

fn cmd_eval(io: &DataArgs, checkpoint: &Path, options: EvalOptions) -> codevae::Result<ExitCode> {
    let (model, _) = CodeVae::load(checkpoint)?;
    let (train_set, heldout) = load_pair(io)?;
    let report = eval::evaluate(&model, &train_set, &heldout, options)?;
    eval::write_eval_csv(&io.out.join("eval_subsets.csv"), &io.out.join("eval_cardinality.csv"), &report)?;
    let pi_trace = eval::pi_trace_report(&model, &heldout)?;
    eval::write_pi_trace_csv(&io.out.join("pi_trace.csv"), &pi_trace)?;
    println!("eval: mean subset elbo {:.4}, mean accuracy {:.4}", report.mean_elbo(), report.mean_accuracy());
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate(io: &DataArgs, config: &TrainConfig, rhos: &[f64], options: EvalOptions) -> codevae::Result<ExitCode> {
    let (train_set, heldout) = load_pair(io)?;
    let ablation = eval::ablation_compare(config, rhos, &train_set, &heldout, options)?;
    eval::write_ablation_csv(&io.out.join("ablation.csv"), &ablation)?;
    println!("ablate: rho*={}", ablation.rho_star);
    for r in &ablation.rows {
        println!("  {:<22} elbo {:.4} accuracy {:.4}", r.variant, r.elbo, r.accuracy);
    }
    Ok(ExitCode::SUCCESS)
}
