use codevae::autodiff::Matrix;
use codevae::config::TrainConfig;
use codevae::data::{generate, MultimodalDataset, SyntheticSpec};
use codevae::eval::{
    ablation_compare, evaluate, frechet_distance, latent_accuracy, latent_classifier_accuracy, pi_trace_report,
    subset_elbo, write_ablation_csv, write_eval_csv, EvalOptions, SoftmaxRegression,
};
use codevae::model::{Architecture, CodeVae};
use codevae::trainer::{subset_traces, train};
use codevae::{CorrelationSpec, Error, SubsetMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn dataset(rows: usize, seed: u64) -> MultimodalDataset {
    generate(&SyntheticSpec::gaussian(3, 6, 2, 0.3), rows, seed).unwrap()
}

fn untrained(ds: &MultimodalDataset) -> CodeVae {
    let arch = Architecture::for_dataset(ds, 3, vec![12], CorrelationSpec::new(0.3).unwrap());
    CodeVae::new(arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig { latent_dim: 3, hidden: vec![12], batch_size: 32, epochs, report_rows: 64, ..TrainConfig::default() }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

#[test]
fn untrained_subset_elbo_is_finite() {
    let ds = dataset(40, 1);
    let model = untrained(&ds);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for mask in model.subsets() {
        let e = subset_elbo(&model, &ds, *mask, 2, &mut rng).unwrap();
        assert!(e.mean.is_finite() && e.std_err.is_finite());
    }
    assert!(subset_elbo(&model, &ds, SubsetMask::full(3).unwrap(), 0, &mut rng).is_err());
}

#[test]
fn few_and_many_samples_agree() {
    let ds = dataset(300, 2);
    let model = untrained(&ds);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mask = SubsetMask::from_bits(0b001, 3).unwrap();
    let one = subset_elbo(&model, &ds, mask, 1, &mut rng).unwrap();
    let many = subset_elbo(&model, &ds, mask, 64, &mut rng).unwrap();
    let se = (one.std_err.powi(2) + many.std_err.powi(2)).sqrt();
    assert!((one.mean - many.mean).abs() < 3.0 * se, "{one:?} vs {many:?}");
}

#[test]
fn estimator_spread_shrinks_with_samples() {
    let ds = dataset(20, 3);
    let model = untrained(&ds);
    let mask = SubsetMask::from_bits(0b110, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spread = |samples: usize, rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..60).map(|_| subset_elbo(&model, &ds, mask, samples, rng).unwrap().mean).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    };
    let ratio = spread(1, &mut rng) / spread(16, &mut rng);
    // Expected 4 = sqrt(16).
    assert!((2.0..=8.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn classifier_at_chance_on_unrelated_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fit = gaussian_matrix(&mut rng, 500, 4);
    let test = gaussian_matrix(&mut rng, 4000, 4);
    let fit_labels: Vec<usize> = (0..500).map(|_| rng.random_range(0..2)).collect();
    let test_labels: Vec<usize> = (0..4000).map(|_| rng.random_range(0..2)).collect();
    let acc = latent_accuracy(&fit, &fit_labels, &test, &test_labels, 2).unwrap();
    assert!((acc - 0.5).abs() <= 0.05, "accuracy {acc}");
}

fn clusters(rng: &mut ChaCha8Rng, rows: usize) -> (Matrix, Vec<usize>) {
    let labels: Vec<usize> = (0..rows).map(|r| r % 3).collect();
    let mut x = gaussian_matrix(rng, rows, 2);
    for (r, l) in labels.iter().enumerate() {
        let v = x.get(r, *l % 2) + if *l == 2 { -6.0 } else { 6.0 };
        x.set(r, *l % 2, v);
    }
    (x, labels)
}

#[test]
fn classifier_separates_separable_latents() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (fit, fl) = clusters(&mut rng, 500);
    let (test, tl) = clusters(&mut rng, 600);
    assert!(latent_accuracy(&fit, &fl, &test, &tl, 3).unwrap() >= 0.95);
}

#[test]
fn classifier_ignores_affine_rescaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (fit, fl) = clusters(&mut rng, 300);
    let (test, tl) = clusters(&mut rng, 300);
    let noisy = |m: &Matrix| m.map(|v| v * 0.2);
    let scaled = |m: &Matrix| m.map(|v| 10.0 * v - 3.0);
    let (fit, test) = (noisy(&fit), noisy(&test));
    let base = latent_accuracy(&fit, &fl, &test, &tl, 3).unwrap();
    let moved = latent_accuracy(&scaled(&fit), &fl, &scaled(&test), &tl, 3).unwrap();
    assert_eq!(base, moved);
}

#[test]
fn single_class_split_is_an_evaluation_error() {
    let x = Matrix::filled(10, 2, 1.0);
    assert!(matches!(SoftmaxRegression::fit(&x, &[1; 10], 3), Err(Error::Evaluation(_))));
}

#[test]
fn trace_report_of_untrained_model() {
    let ds = dataset(50, 7);
    let model = untrained(&ds);
    let rows = pi_trace_report(&model, &ds).unwrap();
    assert_eq!(rows.iter().map(|r| r.subsets).collect::<Vec<_>>(), vec![3, 3, 1]);
    for r in &rows {
        assert!((r.mean_pi - 1.0 / 7.0).abs() < 1e-15);
    }
    let traces = subset_traces(&model, &ds).unwrap();
    for r in &rows {
        let members: Vec<f64> = model
            .subsets()
            .iter()
            .zip(&traces)
            .filter(|(m, _)| m.cardinality() == r.cardinality)
            .map(|(_, t)| *t)
            .collect();
        assert_eq!(r.mean_trace, members.iter().sum::<f64>() / members.len() as f64);
    }
}

#[test]
fn report_groups_are_means_of_subsets() {
    let ds = dataset(700, 8);
    let (tr, ho) = ds.split(560).unwrap();
    let out = train(&quick(3), &tr, None, None).unwrap();
    let report = evaluate(&out.model, &tr, &ho, EvalOptions::default()).unwrap();
    assert_eq!(report.subsets.len(), 7);
    for c in &report.cardinality {
        let group: Vec<_> = report.subsets.iter().filter(|s| s.mask.cardinality() == c.cardinality).collect();
        let n = group.len() as f64;
        assert_eq!(c.elbo, group.iter().map(|s| s.elbo.mean).sum::<f64>() / n);
        assert_eq!(c.accuracy, group.iter().map(|s| s.accuracy).sum::<f64>() / n);
        assert_eq!(c.trace, group.iter().map(|s| s.trace).sum::<f64>() / n);
    }
    assert!(report.subsets.iter().all(|s| (0.0..=1.0).contains(&s.accuracy)));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let acc = latent_classifier_accuracy(&out.model, &tr, &ho, SubsetMask::full(3).unwrap(), true, &mut rng).unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("s.csv"), dir.path().join("c.csv"));
    write_eval_csv(&a, &b, &report).unwrap();
    assert!(std::fs::read_to_string(&a).unwrap().starts_with("subset,cardinality,elbo,elbo_se,accuracy,pi,trace\n"));
    assert_eq!(std::fs::read_to_string(&b).unwrap().lines().count(), 4);
}

#[test]
fn ablation_rows_are_deterministic() {
    let ds = dataset(700, 9);
    let (tr, ho) = ds.split(560).unwrap();
    let a = ablation_compare(&quick(2), &[0.0], &tr, &ho, EvalOptions::default()).unwrap();
    assert_eq!(a.rho_star, 0.0);
    assert_eq!(a.rows.len(), 4);
    // With ρ* = 0 the ρ* and ρ = 0 variants share every setting.
    assert_eq!((a.rows[0].elbo, a.rows[0].accuracy), (a.rows[1].elbo, a.rows[1].accuracy));
    assert_eq!((a.rows[2].elbo, a.rows[2].accuracy), (a.rows[3].elbo, a.rows[3].accuracy));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ablation.csv");
    write_ablation_csv(&path, &a).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with("variant,pi_mode,rho,elbo,accuracy\n"));
}

#[test]
fn frechet_distance_of_shifted_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = gaussian_matrix(&mut rng, 20_000, 3);
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
    let b = gaussian_matrix(&mut rng, 20_000, 3).map(|v| v + 2.0);
    let d = frechet_distance(&a, &b).unwrap();
    assert!((d - 12.0).abs() < 0.3, "distance {d}");
}
