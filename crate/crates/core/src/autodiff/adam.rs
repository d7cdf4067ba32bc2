//! Bias-corrected Adam.

use super::matrix::Matrix;
use crate::error::{arg_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamState {
    pub fn new(learning_rate: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: shapes.iter().map(|(r, c)| Matrix::zeros(*r, *c)).collect(),
            second: shapes.iter().map(|(r, c)| Matrix::zeros(*r, *c)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. With `maximize` the gradients are ascended.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix], maximize: bool) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return arg_err(format!(
                "adam tracks {} tensors but got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.first[i].shape() || g.shape() != self.first[i].shape() {
                return arg_err(format!("adam tensor {i} changed shape"));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let sign = if maximize { -1.0 } else { 1.0 };
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.first.iter_mut().zip(self.second.iter_mut())) {
            let p = p.as_mut_slice();
            let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
            for j in 0..p.len() {
                let gj = sign * g.as_slice()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
