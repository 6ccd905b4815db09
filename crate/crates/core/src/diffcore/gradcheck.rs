//! Central finite differences, the reference every analytic gradient is checked against.

use super::tensor::Tensor;
use crate::error::{config_err, Result};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference estimate of `∂f/∂params`, one entry at a time.
pub fn finite_difference<F>(mut f: F, params: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(config_err!("finite-difference step must be positive, got {step}"));
    }
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = vec![0.0; params[p].len()];
        for (i, g) in grad.iter_mut().enumerate() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let plus = f(&work)?;
            work[p].data_mut()[i] = orig - step;
            let minus = f(&work)?;
            work[p].data_mut()[i] = orig;
            *g = (plus - minus) / (2.0 * step);
        }
        out.push(Tensor::from_parts(params[p].shape().to_vec(), grad));
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, falling back to the absolute difference when
/// both norms are below `1e-8`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.norm().max(numeric.norm());
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

/// Largest relative error across paired gradient lists.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let w = Tensor::vector(vec![3.0]).unwrap();
        let g = finite_difference(|p| Ok(p[0].item().powi(2)), &[w], DEFAULT_STEP).unwrap();
        assert!((g[0].item() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let w = Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let g = finite_difference(|_| Ok(4.2), &[w], DEFAULT_STEP).unwrap();
        assert!(g[0].data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn rejects_non_positive_step() {
        let w = Tensor::vector(vec![1.0]).unwrap();
        assert!(finite_difference(|_| Ok(0.0), &[w], 0.0).is_err());
    }
}
