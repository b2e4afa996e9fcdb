use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::Tensor;
use crate::error::{Error, Result};

/// Which coordinates a gradient check perturbs.
#[derive(Clone, Debug)]
pub enum CoordinateSelection {
    All,
    /// Up to `per_tensor` coordinates per parameter tensor: half drawn from
    /// coordinates with a nonzero analytic gradient, the rest uniformly.
    Sample { per_tensor: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Gradient magnitude below which errors are measured absolutely
    /// (relative to this floor) instead of relatively.
    pub floor: f64,
    pub coordinates: CoordinateSelection,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-6,
            floor: 1e-6,
            coordinates: CoordinateSelection::All,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_tensor: usize,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates_checked: usize,
    /// Coordinates whose perturbation crossed a non-smooth branch.
    pub coordinates_skipped: usize,
    pub passed: bool,
}

/// Compares an analytic gradient against central finite differences.
///
/// `value` evaluates the scalar function at a parameter set; `analytic` is
/// the gradient claimed at `theta`. Relative error per coordinate is
/// `|a − n| / max(|a|, |n|, floor)`.
pub fn grad_check<V>(
    mut value: V,
    analytic: &[Tensor<f64>],
    theta: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    V: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    grad_check_piecewise(|p| Ok((value(p)?, 0)), analytic, theta, opts)
}

/// [`grad_check`] for piecewise-smooth functions: `value` also returns a
/// branch signature, and coordinates whose `±step` evaluations disagree with
/// the unperturbed one are counted as skipped instead of compared.
pub fn grad_check_piecewise<V>(
    mut value: V,
    analytic: &[Tensor<f64>],
    theta: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    V: FnMut(&[Tensor<f64>]) -> Result<(f64, u64)>,
{
    if analytic.len() != theta.len()
        || analytic.iter().zip(theta).any(|(a, t)| a.shape() != t.shape())
    {
        return Err(Error::dim("grad_check", "analytic gradient does not mirror parameters"));
    }
    let mut params: Vec<Tensor<f64>> = theta.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_tensor: 0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates_checked: 0,
        coordinates_skipped: 0,
        passed: true,
    };
    let h = opts.step;
    let (_, centre) = value(&params)?;
    for (ti, grad) in analytic.iter().enumerate() {
        for i in select(grad, ti, &opts.coordinates) {
            let orig = params[ti].data()[i];
            params[ti].data_mut()[i] = orig + h;
            let (up, sig_up) = value(&params)?;
            params[ti].data_mut()[i] = orig - h;
            let (down, sig_down) = value(&params)?;
            params[ti].data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Evaluation(format!(
                    "non-finite objective near tensor {ti} coordinate {i}"
                )));
            }
            if sig_up != centre || sig_down != centre {
                report.coordinates_skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            report.coordinates_checked += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_tensor = ti;
                report.worst_index = i;
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report.passed = report.max_relative_error < opts.tolerance;
    Ok(report)
}

fn select(grad: &Tensor<f64>, tensor_index: usize, how: &CoordinateSelection) -> Vec<usize> {
    let n = grad.len();
    match *how {
        CoordinateSelection::All => (0..n).collect(),
        CoordinateSelection::Sample { per_tensor, seed } => {
            if n <= per_tensor {
                return (0..n).collect();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (tensor_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let nonzero: Vec<usize> = (0..n).filter(|&i| grad.data()[i] != 0.0).collect();
            let want_nz = (per_tensor / 2).min(nonzero.len());
            let mut picked: Vec<usize> = sample(&mut rng, nonzero.len(), want_nz)
                .into_iter()
                .map(|k| nonzero[k])
                .collect();
            for k in sample(&mut rng, n, per_tensor - want_nz) {
                if !picked.contains(&k) {
                    picked.push(k);
                }
            }
            picked.sort_unstable();
            picked
        }
    }
}
