use crate::error::{Error, Result};

use super::PolicyModel;

/// Central-difference gradient of `loss` with respect to every parameter.
///
/// Costs two loss evaluations per parameter; meant for models of a few
/// thousand parameters.
pub fn finite_diff_gradient<F>(model: &PolicyModel, loss: F, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&PolicyModel) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!("step must be > 0, got {h}")));
    }
    let mut probe = model.clone();
    let mut grad = Vec::with_capacity(model.params().len());
    for i in 0..model.params().len() {
        let orig = model.params()[i];
        probe.params_mut()[i] = orig + h;
        let up = loss(&probe)?;
        probe.params_mut()[i] = orig - h;
        let down = loss(&probe)?;
        probe.params_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest elementwise `|a - b| / max(|a|, |b|, 1e-3)`.
///
/// The floor keeps near-zero coordinates from dominating; below it the
/// measure is an absolute error scaled by 1e3.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
        .fold(0.0, f64::max)
}
