use super::{Tensor, TensorError};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is (numerically) zero are judged on absolute error instead.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares an analytic gradient against central finite differences.
///
/// `f` returns the scalar value and its analytic gradient at the given
/// point. Each coordinate is perturbed by `±h` and the result is the
/// maximum of `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F>(mut f: F, theta: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor), TensorError>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(TensorError::InvalidStep(h));
    }
    let (_, analytic) = f(theta)?;
    if analytic.shape() != theta.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "grad_check",
            left: theta.shape().to_vec(),
            right: analytic.shape().to_vec(),
        });
    }
    let mut probe = theta.clone();
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        let orig = theta.data()[i];
        probe.data_mut()[i] = orig + h;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
