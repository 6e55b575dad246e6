use crate::error::{NumError, Result};
use crate::tensor::Tensor;

/// Central finite differences `(f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)`
/// for every coordinate of `x`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(NumError::Config(format!("finite-difference eps {eps} must be > 0")));
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }
    Ok(out)
}

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)`. The floor keeps
/// coordinates whose true derivative is ~0 from reporting roundoff as error.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
