use crate::tensor::{Element, Tensor};
use crate::{Result, TensorError};

/// Central-difference gradient of a scalar function.
///
/// Each coordinate is estimated as `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` with the
/// difference taken in `f64`. `f` is evaluated twice at `x` first; differing
/// results are reported as [`TensorError::NonDeterministic`].
pub fn finite_difference_gradient<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<Tensor<T>>
where
    T: Element,
    F: Fn(&Tensor<T>) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(TensorError::InvalidParam {
            op: "finite_difference_gradient",
            detail: format!("step must be positive, got {h}"),
        });
    }
    let (first, second) = (f(x)?, f(x)?);
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = T::from_f64(orig.as_f64() + h);
        let up = f(&probe)?;
        probe.data_mut()[i] = T::from_f64(orig.as_f64() - h);
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push(T::from_f64((up - down) / (2.0 * h)));
    }
    Tensor::new(x.shape().to_vec(), grad)
}
