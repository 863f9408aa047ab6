use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape's gradient of `f` at `x` with central differences.
///
/// Returns the largest elementwise
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<f64>
where
    T: Scalar,
    F: Fn(&Tape<T>, Var) -> Result<Var>,
{
    finite_diff_check_with(f, x, eps, 0.0)
}

/// As [`finite_diff_check`], but elements where both derivatives are below
/// `abs_floor` in magnitude count as agreeing. With `abs_floor = 0` this is
/// the plain check.
pub fn finite_diff_check_with<T, F>(f: F, x: &Tensor<T>, eps: T, abs_floor: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&Tape<T>, Var) -> Result<Var>,
{
    if !(eps > T::zero()) {
        return Err(Error::Contract("finite_diff_check needs eps > 0".into()));
    }
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(xv)
        .ok_or_else(|| Error::Contract("no gradient reached the checked input".into()))?;

    let eval = |probe: Tensor<T>| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(probe);
        let out = f(&tape, v)?;
        Ok(tape.value(out).item()?.as_f64())
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps.as_f64());
        let a = analytic.data()[i].as_f64();
        if a.abs() < abs_floor && numeric.abs() < abs_floor {
            continue;
        }
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
