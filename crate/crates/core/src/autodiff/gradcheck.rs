//! Central finite-difference verification of tape gradients (64-bit).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Added to the denominator of the relative error so that coordinates
    /// whose true gradient is ~0 are judged on absolute error.
    pub abs_floor: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-3,
            abs_floor: 1e-6,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoordError {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<CoordError>,
    pub coords_checked: usize,
    pub passed: bool,
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value();
        if v.numel() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
        passed: true,
    };
    for input in 0..inputs.len() {
        let n = inputs[input].numel();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for index in coords {
            let orig = work[input].data()[index];
            work[input].data_mut()[index] = orig + opts.step;
            let plus = eval(&work)?;
            work[input].data_mut()[index] = orig - opts.step;
            let minus = eval(&work)?;
            work[input].data_mut()[index] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[input].data()[index];
            let rel = (a - numeric).abs() / (a.abs().max(numeric.abs()) + opts.abs_floor);
            report.coords_checked += 1;
            if !rel.is_finite() || rel > report.max_rel_error {
                report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst = Some(CoordError {
                    input,
                    index,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    report.passed = report.max_rel_error < opts.tolerance;
    Ok(report)
}
