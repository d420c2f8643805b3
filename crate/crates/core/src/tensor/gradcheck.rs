use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|a - c| / (|a| + |c| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns the worst relative error over all entries of `x`.
///
/// `f` must build its computation on the tape it is handed, starting from the
/// provided input variable, and return a scalar.
pub fn check_gradients<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zeros(xv, x.shape());

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let out = f(&mut tape, v)?;
        tape.value(out).item()
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        if !a.is_finite() || !numeric.is_finite() {
            return Err(Error::Domain(format!("non-finite gradient at entry {i}")));
        }
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}
