use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function, one coordinate at a
/// time: `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`.
///
/// This is the verification oracle for every analytic gradient in the
/// crate; it only calls `f` and never looks inside it.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step {h} must be > 0")));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for (i, slot) in grad.iter_mut().enumerate() {
        let original = x.data()[i];
        probe.data_mut()[i] = original + h;
        let plus = f(&probe)?;
        if !plus.is_finite() {
            return Err(Error::NonFiniteProbe { coordinate: i, sign: '+' });
        }
        probe.data_mut()[i] = original - h;
        let minus = f(&probe)?;
        if !minus.is_finite() {
            return Err(Error::NonFiniteProbe { coordinate: i, sign: '-' });
        }
        probe.data_mut()[i] = original;
        *slot = (plus - minus) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both are exactly zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
