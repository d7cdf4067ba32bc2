//! Central finite-difference checks of reverse-mode gradients.

use super::{Matrix, NodeId, Tape};
use crate::error::{arg_err, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub step: f64,
    pub relative: f64,
    /// Differences below this pass regardless of the relative error.
    pub absolute: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { step: 1e-4, relative: 1e-4, absolute: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub failures: usize,
    /// Entries that miss at `step` only because the probe straddles a
    /// derivative discontinuity (a relu or |x| kink). These are excluded from
    /// `failures`.
    pub kinks: usize,
    /// Largest relative error among entries whose gradient exceeds the
    /// absolute tolerance.
    pub max_relative_error: f64,
    /// `(input, entry, analytic, numeric)` of the worst failing entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares `analytic[i]` with central differences of `value` around
/// `inputs`, entry by entry.
///
/// A missed entry counts as a kink rather than a failure when its two
/// one-sided differences disagree (the slope jumps inside the probe) and a
/// central difference with a step 100 times smaller matches the analytic
/// value. A wrong gradient matches at neither step.
pub fn check_gradients(
    inputs: &[Matrix],
    analytic: &[Matrix],
    tol: Tolerance,
    value: impl Fn(&[Matrix]) -> Result<f64>,
) -> Result<GradCheck> {
    if inputs.len() != analytic.len() || inputs.iter().zip(analytic).any(|(a, b)| a.shape() != b.shape()) {
        return arg_err("analytic gradients must mirror the inputs");
    }
    let mut out = GradCheck { checked: 0, failures: 0, kinks: 0, max_relative_error: 0.0, worst: None };
    let mut worst_err = 0.0;
    let mut probe = inputs.to_vec();
    for i in 0..inputs.len() {
        for e in 0..inputs[i].len() {
            let x = inputs[i].as_slice()[e];
            probe[i].as_mut_slice()[e] = x + tol.step;
            let up = value(&probe)?;
            probe[i].as_mut_slice()[e] = x - tol.step;
            let down = value(&probe)?;
            probe[i].as_mut_slice()[e] = x;
            let numeric = (up - down) / (2.0 * tol.step);
            let a = analytic[i].as_slice()[e];
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            out.checked += 1;
            let agrees = |n: f64| {
                let d = (a - n).abs();
                d <= tol.absolute || d <= tol.relative * a.abs().max(n.abs())
            };
            if agrees(numeric) {
                if scale > tol.absolute {
                    out.max_relative_error = out.max_relative_error.max(diff / scale);
                }
                continue;
            }
            let centre = value(&probe)?;
            let (forward, backward) = ((up - centre) / tol.step, (centre - down) / tol.step);
            let small = tol.step / 100.0;
            probe[i].as_mut_slice()[e] = x + small;
            let up = value(&probe)?;
            probe[i].as_mut_slice()[e] = x - small;
            let down = value(&probe)?;
            probe[i].as_mut_slice()[e] = x;
            // Across a kink at distance δ < step the central error is
            // jump·(step − δ)/(2·step), half the one-sided gap.
            if (forward - backward).abs() >= diff && agrees((up - down) / (2.0 * small)) {
                out.kinks += 1;
                continue;
            }
            if scale > tol.absolute {
                out.max_relative_error = out.max_relative_error.max(diff / scale);
            }
            out.failures += 1;
            if diff > worst_err {
                worst_err = diff;
                out.worst = Some((i, e, a, numeric));
            }
        }
    }
    Ok(out)
}

/// Checks a scalar function recorded by `build` on leaves holding `inputs`.
pub fn check_tape_function(
    inputs: &[Matrix],
    tol: Tolerance,
    build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
) -> Result<GradCheck> {
    let run = |xs: &[Matrix]| -> Result<(Tape, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &leaves)?;
        Ok((tape, leaves, out))
    };
    let (tape, leaves, out) = run(inputs)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Matrix> = leaves.iter().zip(inputs).map(|(l, x)| grads.get_or_zeros(*l, x.shape())).collect();
    check_gradients(inputs, &analytic, tol, |xs| {
        let (tape, _, out) = run(xs)?;
        Ok(tape.value(out).get(0, 0))
    })
}
