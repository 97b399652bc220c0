//! Central finite-difference gradient checks (f64).
//!
//! The checker only evaluates the forward program; it never touches the
//! backward rules it verifies.

use rand::Rng;

use super::array::Tensor;
use super::tape::{Tape, Var};
use crate::rng;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor of the relative error, so that entries whose true
    /// gradient is ~0 are compared absolutely.
    pub floor: f64,
    /// At most this many coordinates are perturbed per input (sampled).
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, floor: 1e-3, max_coords: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares analytic gradients of `sum(f(inputs) ∘ W)` (W a fixed random
/// projection) with central differences.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, opts: &GradCheckOptions) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let mut rng = rng::stream(opts.seed, 0x6772_6164);
    let projection = {
        let tape = Tape::no_grad();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars);
        Tensor::from_fn(out.shape().to_vec(), |_| rng.random_range(-1.0..1.0))
    };
    let objective = |values: &[Tensor<f64>]| -> f64 {
        let tape = Tape::no_grad();
        let vars: Vec<_> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars);
        out.data().iter().zip(projection.data()).map(|(a, b)| a * b).sum()
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars);
    let loss = out.mul(&tape.constant(projection.clone())).sum();
    let grads = tape.backward(&loss).expect("objective must depend on the inputs");

    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var);
        let n = inputs[i].len();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            (0..opts.max_coords).map(|_| rng.random_range(0..n)).collect()
        };
        for j in coords {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + opts.step;
            let plus = objective(&work);
            work[i].data_mut()[j] = x0 - opts.step;
            let minus = objective(&work);
            work[i].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.max_rel_err = report.max_rel_err.max(err);
            report.checked += 1;
        }
    }
    report
}
