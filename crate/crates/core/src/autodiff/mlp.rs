//! Fully connected networks: rectifier hidden layers, identity output.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::matrix::Matrix;
use super::tape::{NodeId, Tape};
use crate::error::{arg_err, Result};

/// Floor added to the softplus std head.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `inputs x outputs`
    pub weight: Matrix,
    /// `1 x outputs`
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Linear>,
}

/// Node ids of an [`MlpParams`] bound as leaves on a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl MlpParams {
    /// He-normal weights for the rectifier layers, `1/fan_in` variance for the
    /// output layer, zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return arg_err(format!("invalid layer sizes {sizes:?}"));
        }
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let gain = if i == last { 1.0 } else { 2.0 };
                let normal = Normal::new(0.0, (gain / w[0] as f64).sqrt()).expect("positive std");
                let data = (0..w[0] * w[1]).map(|_| normal.sample(rng)).collect();
                Linear { weight: Matrix::from_vec(w[0], w[1], data).expect("shape"), bias: Matrix::zeros(1, w[1]) }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return arg_err("network needs at least one layer");
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != (1, l.weight.cols()) {
                return arg_err(format!("layer {i}: bias shape {:?} mismatches weight", l.bias.shape()));
            }
            if i > 0 && layers[i - 1].weight.cols() != l.weight.rows() {
                return arg_err(format!("layer {i} does not chain with layer {}", i - 1));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.cols()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.weight.cols()));
        s
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp {
            layers: self.layers.iter().map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone()))).collect(),
        }
    }

    /// Straight-line evaluation without a tape.
    pub fn evaluate(&self, input: &Matrix) -> Result<Matrix> {
        let mut h = input.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = h.matmul(&l.weight)?;
            for r in 0..h.rows() {
                for (v, b) in h.row_mut(r).iter_mut().zip(l.bias.as_slice()) {
                    *v += b;
                }
            }
            if i + 1 < self.layers.len() {
                h = h.map(|x| x.max(0.0));
            }
        }
        Ok(h)
    }
}

/// Records the network on `tape` and returns the output node.
pub fn forward_mlp(bound: &BoundMlp, tape: &mut Tape, input: NodeId) -> Result<NodeId> {
    let mut h = input;
    let n = bound.layers.len();
    for (i, (w, b)) in bound.layers.iter().enumerate() {
        let a = tape.matmul(h, *w)?;
        h = tape.add_bias(a, *b)?;
        if i + 1 < n {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Splits an encoder output of width `2·latent` into a mean head and a
/// `softplus(raw) + STD_FLOOR` std head.
pub fn encoder_heads(tape: &mut Tape, output: NodeId, latent: usize) -> Result<(NodeId, NodeId)> {
    if tape.shape(output).1 != 2 * latent {
        return arg_err(format!("encoder output width {} is not twice the latent size {latent}", tape.shape(output).1));
    }
    let mean = tape.col_slice(output, 0, latent)?;
    let raw = tape.col_slice(output, latent, latent)?;
    let sp = tape.softplus(raw);
    Ok((mean, tape.offset(sp, STD_FLOOR)))
}

/// `mean + std ⊙ epsilon` with `epsilon` recorded as a constant leaf.
pub fn reparameterize(tape: &mut Tape, mean: NodeId, std: NodeId, epsilon: &Matrix) -> Result<NodeId> {
    if tape.shape(mean) != epsilon.shape() || tape.shape(std) != epsilon.shape() {
        return arg_err(format!(
            "reparameterize: mean {:?}, std {:?}, noise {:?}",
            tape.shape(mean),
            tape.shape(std),
            epsilon.shape()
        ));
    }
    let eps = tape.leaf(epsilon.clone());
    let scaled = tape.mul(std, eps)?;
    tape.add(mean, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let layer = Linear { weight: Matrix::zeros(3, 2), bias: Matrix::zeros(1, 2) };
        let net = MlpParams::from_layers(vec![layer]).unwrap();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let x = tape.leaf(Matrix::row_vector(vec![1.0, -2.0, 3.0]));
        let y = forward_mlp(&bound, &mut tape, x).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn affine_unit() {
        let layer = Linear { weight: Matrix::scalar(2.0), bias: Matrix::scalar(1.0) };
        let net = MlpParams::from_layers(vec![layer]).unwrap();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let x = tape.leaf(Matrix::scalar(3.0));
        let y = forward_mlp(&bound, &mut tape, x).unwrap();
        assert_eq!(tape.value(y).get(0, 0), 7.0);
    }

    #[test]
    fn tape_matches_straight_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = MlpParams::new(&[5, 7, 4], &mut rng).unwrap();
        let input = Matrix::from_vec(3, 5, (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let x = tape.leaf(input.clone());
        let y = forward_mlp(&bound, &mut tape, x).unwrap();
        let direct = net.evaluate(&input).unwrap();
        for (a, b) in tape.value(y).as_slice().iter().zip(direct.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = MlpParams::new(&[4, 2], &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let x = tape.leaf(Matrix::zeros(1, 3));
        assert!(forward_mlp(&bound, &mut tape, x).is_err());
        assert!(net.evaluate(&Matrix::zeros(1, 3)).is_err());
        let bad = vec![
            Linear { weight: Matrix::zeros(2, 3), bias: Matrix::zeros(1, 3) },
            Linear { weight: Matrix::zeros(4, 1), bias: Matrix::zeros(1, 1) },
        ];
        assert!(MlpParams::from_layers(bad).is_err());
    }

    #[test]
    fn std_head_floor() {
        let mut tape = Tape::new();
        let out = tape.leaf(Matrix::row_vector(vec![0.0, 0.0, -1000.0, 5.0]));
        let (mean, std) = encoder_heads(&mut tape, out, 2).unwrap();
        assert_eq!(tape.value(mean).as_slice(), &[0.0, 0.0]);
        assert!(tape.value(std).as_slice().iter().all(|s| *s >= STD_FLOOR));
    }

    #[test]
    fn reparameterize_examples() {
        let mut tape = Tape::new();
        let mean = tape.leaf(Matrix::row_vector(vec![1.0, -2.0]));
        let std = tape.leaf(Matrix::row_vector(vec![0.5, 3.0]));
        let z = reparameterize(&mut tape, mean, std, &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(tape.value(z).as_slice(), &[1.0, -2.0]);

        let zero = tape.leaf(Matrix::zeros(1, 2));
        let one = tape.leaf(Matrix::filled(1, 2, 1.0));
        let e = Matrix::row_vector(vec![0.3, -1.7]);
        let z = reparameterize(&mut tape, zero, one, &e).unwrap();
        assert_eq!(tape.value(z).as_slice(), e.as_slice());
        assert!(reparameterize(&mut tape, zero, one, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn reparameterized_draws_have_target_moments() {
        use rand_distr::StandardNormal;
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eps = Matrix::from_vec(n, 1, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let mut tape = Tape::new();
        let mean = tape.leaf(Matrix::filled(n, 1, 2.5));
        let std = tape.leaf(Matrix::filled(n, 1, 0.8));
        let z = reparameterize(&mut tape, mean, std, &eps).unwrap();
        let draws = tape.value(z).as_slice();
        let m = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
        assert!((m - 2.5).abs() < 3.0 * 0.8 / (n as f64).sqrt());
        // SE of the sample std is about σ/√(2n)
        assert!((var.sqrt() - 0.8).abs() < 3.0 * 0.8 / (2.0 * n as f64).sqrt());
    }
}
