//! Central finite-difference gradient checks.

use crate::error::{Error, Result};
use crate::model::ParameterStore;
use crate::nn::Tensor;

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `grad` against central differences of `f` around `theta`.
///
/// Returns the maximum [`relative_error`] over all entries.
pub fn finite_diff_check<F>(mut f: F, theta: &Tensor, grad: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if grad.shape() != theta.shape() {
        return Err(Error::Shape("gradient and parameter shapes differ".into()));
    }
    let mut probe = theta.clone();
    let mut worst: f64 = 0.0;
    for k in 0..theta.len() {
        let orig = theta.data()[k];
        probe.data_mut()[k] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[k] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[k] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective at entry {k}")));
        }
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(grad.data()[k], numeric));
    }
    Ok(worst)
}

/// Per-parameter worst relative error for every tensor in `store`.
///
/// `loss` evaluates the objective; `grads` must already hold the analytic
/// gradients (e.g. from [`crate::nn::Graph::backward`]).
pub fn check_store<F>(store: &ParameterStore, mut loss: F, eps: f64) -> Result<Vec<(String, f64)>>
where
    F: FnMut(&ParameterStore) -> Result<f64>,
{
    let mut scratch = store.clone();
    let mut report = Vec::new();
    for (id, p) in store.iter() {
        let err = finite_diff_check(
            |t| {
                scratch.get_mut(id).value = t.clone();
                loss(&scratch)
            },
            &p.value,
            &p.grad,
            eps,
        )?;
        scratch.get_mut(id).value = p.value.clone();
        report.push((p.name.clone(), err));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_on_quadratic() {
        let theta = Tensor::vector(&[1.0, -2.0, 0.5]);
        let grad = Tensor::vector(&[2.0, -4.0, 1.0]);
        let err = finite_diff_check(
            |t| Ok(t.data().iter().map(|x| x * x).sum()),
            &theta,
            &grad,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9);
    }

    #[test]
    fn detects_wrong_gradient() {
        let theta = Tensor::vector(&[1.0]);
        let err = finite_diff_check(|t| Ok(t.data()[0].powi(2)), &theta, &Tensor::vector(&[3.0]), 1e-5)
            .unwrap();
        assert!(err > 0.3);
    }

    #[test]
    fn non_finite_objective_errors() {
        let theta = Tensor::vector(&[0.0]);
        let r = finite_diff_check(|_| Ok(f64::NAN), &theta, &Tensor::vector(&[0.0]), 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
