//! Finite-difference cases for every differentiable tape op and for the
//! full model objective. Shared by the unit-level and acceptance suites.

#![allow(dead_code)]

use codevae::autodiff::gradcheck::{check_gradients, check_tape_function, GradCheck, Tolerance};
use codevae::autodiff::{Matrix, NodeId, Tape};
use codevae::data::{generate, ModalityKind, SyntheticSpec};
use codevae::elbo::{LikelihoodFamily, PiPlacement};
use codevae::model::{Architecture, CodeVae, ObjectiveSettings};
use codevae::{CorrelationSpec, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Matrix>,
    pub build: Build,
}

/// Entries uniform in `[lo, hi]`, optionally with a random sign.
fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64, signed: bool) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let v = rng.random_range(lo..hi);
            if signed && rng.random_bool(0.5) {
                -v
            } else {
                v
            }
        })
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// entry contributes a distinct adjoint.
fn weighted_sum(tape: &mut Tape, out: NodeId, weights: &Matrix) -> Result<NodeId> {
    let (r, c) = tape.shape(out);
    let w = tape.leaf(weights.slice_rows(0, r).transpose().slice_rows(0, c).transpose());
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn case(
    name: &'static str,
    inputs: Vec<Matrix>,
    rng: &mut ChaCha8Rng,
    op: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId> + 'static,
) -> OpCase {
    let weights = random(rng, 16, 16, 0.2, 1.5, true);
    OpCase {
        name,
        inputs,
        build: Box::new(move |t, l| {
            let out = op(t, l)?;
            weighted_sum(t, out, &weights)
        }),
    }
}

/// One randomized instance of each op.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut g = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut g;
    let (n, k, m) = (3, 4, 2);
    let mut cases = Vec::new();
    let any = |r: &mut ChaCha8Rng, a, b| random(r, a, b, 0.1, 2.0, true);
    let pos = |r: &mut ChaCha8Rng, a, b| random(r, a, b, 0.5, 2.0, false);

    let i = vec![any(r, n, k), any(r, k, m)];
    cases.push(case("matmul", i, r, |t, l| t.matmul(l[0], l[1])));
    let i = vec![any(r, n, k), any(r, 1, k)];
    cases.push(case("add_bias", i, r, |t, l| t.add_bias(l[0], l[1])));
    let i = vec![any(r, n, k), any(r, n, k)];
    cases.push(case("add", i, r, |t, l| t.add(l[0], l[1])));
    let i = vec![any(r, n, k), any(r, n, k)];
    cases.push(case("sub", i, r, |t, l| t.sub(l[0], l[1])));
    let i = vec![any(r, n, k), any(r, n, k)];
    cases.push(case("mul", i, r, |t, l| t.mul(l[0], l[1])));
    let i = vec![any(r, n, k), pos(r, n, k)];
    cases.push(case("div", i, r, |t, l| t.div(l[0], l[1])));
    let i = vec![any(r, n, k)];
    cases.push(case("scale", i, r, |t, l| Ok(t.scale(l[0], -1.7))));
    let i = vec![any(r, n, k)];
    cases.push(case("offset", i, r, |t, l| Ok(t.offset(l[0], 0.3))));
    let i = vec![any(r, n, k)];
    cases.push(case("relu", i, r, |t, l| Ok(t.relu(l[0]))));
    let i = vec![any(r, n, k)];
    cases.push(case("softplus", i, r, |t, l| Ok(t.softplus(l[0]))));
    let i = vec![any(r, n, k)];
    cases.push(case("exp", i, r, |t, l| Ok(t.exp(l[0]))));
    let i = vec![pos(r, n, k)];
    cases.push(case("ln", i, r, |t, l| Ok(t.ln(l[0]))));
    let i = vec![any(r, n, k)];
    cases.push(case("square", i, r, |t, l| Ok(t.square(l[0]))));
    let i = vec![pos(r, n, k)];
    cases.push(case("sqrt", i, r, |t, l| Ok(t.sqrt(l[0]))));
    let i = vec![pos(r, n, k)];
    cases.push(case("recip", i, r, |t, l| Ok(t.recip(l[0]))));
    let i = vec![any(r, n, k)];
    cases.push(case("sum", i, r, |t, l| Ok(t.sum(l[0]))));
    let i = vec![any(r, n, k)];
    cases.push(case("row_sum", i, r, |t, l| Ok(t.row_sum(l[0]))));
    let i = vec![any(r, 6, k)];
    cases.push(case("block_mean", i, r, |t, l| t.block_mean(l[0], 3)));
    let i = vec![any(r, n, k)];
    cases.push(case("transpose", i, r, |t, l| Ok(t.transpose(l[0]))));
    let i = vec![any(r, n, 5)];
    cases.push(case("col_slice", i, r, |t, l| t.col_slice(l[0], 1, 3)));
    let i = vec![any(r, 2, k), any(r, n, k)];
    cases.push(case("concat_rows", i, r, |t, l| t.concat_rows(&[l[0], l[1], l[0]])));
    let i = vec![any(r, n, k)];
    cases.push(case("log_softmax", i, r, |t, l| Ok(t.log_softmax(l[0]))));
    let i = vec![any(r, n, k)];
    cases.push(case("softmax", i, r, |t, l| Ok(t.softmax(l[0]))));

    let target = any(r, n, k);
    let i = vec![any(r, n, k)];
    cases.push(case("gaussian_log_density", i, r, move |t, l| t.gaussian_log_density(l[0], &target)));
    // Residuals kept away from the kink at zero.
    let mean = any(r, n, k);
    let offsets = random(r, n, k, 0.2, 1.0, true);
    let target =
        Matrix::from_vec(n, k, mean.as_slice().iter().zip(offsets.as_slice()).map(|(a, b)| a + b).collect()).unwrap();
    cases.push(case("laplace_log_density", vec![mean], r, move |t, l| t.laplace_log_density(l[0], &target)));
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let i = vec![any(r, n, k)];
    cases.push(case("categorical_log_density", i, r, move |t, l| t.categorical_log_density(l[0], &labels)));

    for (name, experts, rho) in [
        ("consensus_weights_1", 1, 0.5),
        ("consensus_weights_2", 2, 0.6),
        ("consensus_weights_3", 3, 0.4),
        ("consensus_weights_4", 4, 0.8),
    ] {
        let rho: f64 = rho;
        let i: Vec<Matrix> = (0..experts).map(|_| random(r, 2, 3, 0.3, 2.0, false)).collect();
        cases.push(case(name, i, r, move |t, l| t.consensus_weights(l, rho)));
    }
    cases
}

pub fn check_op(case: &OpCase) -> Result<GradCheck> {
    check_tape_function(&case.inputs, Tolerance::default(), &case.build)
}

/// Small three-modality model (Gaussian, Laplace and categorical) with
/// random parameters, and a batch for it.
pub fn tiny_model(seed: u64, rho: f64) -> (CodeVae, codevae::data::MultimodalDataset) {
    let spec = SyntheticSpec {
        modalities: vec![
            ModalityKind::Linear { dim: 3, noise_std: 0.3, likelihood: LikelihoodFamily::Gaussian },
            ModalityKind::Linear { dim: 2, noise_std: 0.3, likelihood: LikelihoodFamily::Laplace },
            ModalityKind::Label,
        ],
        factor_dim: 2,
        classes: 3,
        loading_seed: 5,
        duplication: None,
    };
    let batch = generate(&spec, 5, seed).unwrap();
    let arch = Architecture::for_dataset(&batch, 2, vec![4], CorrelationSpec::new(rho).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = CodeVae::new(arch, &mut rng).unwrap();
    let logits = model.pi_param_index();
    let mut params = model.params_mut();
    for v in params[logits].as_mut_slice() {
        *v = rng.random_range(-1.0..1.0);
    }
    (model, batch)
}

/// Finite-difference check of the full objective with respect to every
/// parameter of a random [`tiny_model`].
pub fn check_objective(seed: u64, placement: PiPlacement) -> Result<GradCheck> {
    let (model, batch) = tiny_model(seed, 0.3 + 0.1 * (seed % 5) as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe95);
    let eps = random(&mut rng, batch.len(), 2, 0.0, 1.5, true);
    let settings = ObjectiveSettings { beta: 1.7, entropy_scale: 3.0, placement };
    let mut tape = Tape::new();
    let graph = model.build_objective(&mut tape, &batch, &eps, settings)?;
    let grads = tape.backward(graph.objective)?;
    let inputs: Vec<Matrix> = model.params().into_iter().cloned().collect();
    let analytic: Vec<Matrix> =
        graph.params.iter().zip(&inputs).map(|(id, p)| grads.get_or_zeros(*id, p.shape())).collect();
    check_gradients(&inputs, &analytic, Tolerance::default(), |xs| {
        let mut m = model.clone();
        for (p, x) in m.params_mut().into_iter().zip(xs) {
            *p = x.clone();
        }
        let mut tape = Tape::new();
        let g = m.build_objective(&mut tape, &batch, &eps, settings)?;
        Ok(tape.value(g.objective).get(0, 0))
    })
}
