//! Central-difference verification of reverse-mode gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Perturbation for `(f(x + eps) - f(x - eps)) / (2 eps)`.
    pub eps: f64,
    /// Check at most this many coordinates per input (sampled with `seed`).
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Relative inconsistency between one-sided slopes above which a
    /// coordinate is treated as straddling a kink and excluded.
    pub kink_tol: f64,
    /// Denominator floor for relative errors of near-zero gradients.
    pub rel_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-4,
            max_coords: None,
            seed: 0,
            kink_tol: 1e-6,
            rel_floor: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradReport {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    /// Worst relative error per named input.
    pub per_parameter_errors: BTreeMap<String, f64>,
    pub checked: usize,
    /// Coordinates excluded because the function is not differentiable there.
    pub kinks: usize,
}

impl GradReport {
    fn merge(&mut self, name: &str, abs: f64, rel: f64) {
        self.max_abs_error = self.max_abs_error.max(abs);
        self.max_rel_error = self.max_rel_error.max(rel);
        let slot = self.per_parameter_errors.entry(name.to_string()).or_insert(0.0);
        *slot = slot.max(rel);
        self.checked += 1;
    }
}

fn eval<F>(f: &mut F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: FnMut(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let v = f(inputs)?.item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("function value {v}")));
    }
    Ok(v)
}

/// Checks the gradient of a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, opts: &GradCheckOptions) -> Result<GradReport>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    grad_check_many(|xs| f(&xs[0]), &[("x".to_string(), x.clone())], opts)
}

/// Checks the gradient of a scalar function with respect to several named
/// inputs. The function receives the inputs in the given order.
pub fn grad_check_many<F>(
    mut f: F,
    inputs: &[(String, Tensor<f64>)],
    opts: &GradCheckOptions,
) -> Result<GradReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(_, t)| t.detach().requires_grad(true))
        .collect();
    let loss = f(&leaves)?;
    let base = loss.item()?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("function value {base}")));
    }
    loss.backward()?;
    drop(loss);
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let constants: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.detach()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradReport::default();
    for (i, (name, t)) in inputs.iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let mut probe = |delta: f64| -> Result<f64> {
                let mut data = t.to_vec();
                data[j] += delta;
                let mut args = constants.clone();
                args[i] = Tensor::from_vec(data, t.shape())?;
                eval(&mut f, &args)
            };
            let plus = probe(opts.eps)?;
            let minus = probe(-opts.eps)?;
            let half_plus = probe(0.5 * opts.eps)?;
            let half_minus = probe(-0.5 * opts.eps)?;
            // One-sided slopes at two step sizes. On a smooth function
            // r1 - 2 r2 + 2 l2 - l1 vanishes to O(h^3) and (r1 - r2) - (l2 - l1)
            // to O(h^2); a slope jump anywhere inside the probed interval
            // breaks at least one of them.
            let h = opts.eps;
            let (r1, r2) = ((plus - base) / h, (half_plus - base) / (0.5 * h));
            let (l1, l2) = ((base - minus) / h, (base - half_minus) / (0.5 * h));
            let even = r1 - 2.0 * r2 + 2.0 * l2 - l1;
            let odd = (r1 - r2) - (l2 - l1);
            let slope = ((plus - minus) / (2.0 * h)).abs();
            let noise = 64.0 * f64::EPSILON * base.abs().max(plus.abs()).max(minus.abs()) / h;
            let limit = opts.kink_tol * slope + noise;
            if even.abs() > limit || odd.abs() > limit {
                report.kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[i][j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.rel_floor);
            report.merge(name, abs, rel);
        }
    }
    Ok(report)
}
