//! Finite-difference gradient oracle.

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Compare the tape's analytic gradient of `f` at `at` against central
/// differences. Returns the max over coordinates of
/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, at: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    assert!(eps > 0.0, "grad_check eps must be positive");

    let eval = |data: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(at.shape.clone(), data.to_vec())?);
        let loss = f(&mut tape, x)?;
        let v = tape.value(loss);
        if !v.is_scalar() {
            return Err(Error::shape("grad_check: fn must return scalar", &v.shape, &[1]));
        }
        let out = v.item();
        if !out.is_finite() {
            return Err(Error::NonFinite("grad_check forward"));
        }
        Ok(out)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let x = tape.param(at.clone());
    let loss = f(&mut tape, x)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::shape(
            "grad_check: fn must return scalar",
            &tape.value(loss).shape,
            &[1],
        ));
    }
    tape.backward(loss)?;
    let analytic = tape.grad(x).unwrap_or(&[]).to_vec();
    if analytic.len() != at.numel() {
        return Err(Error::shape("grad_check: missing gradient", &at.shape, &[analytic.len()]));
    }

    let mut worst: f64 = 0.0;
    let mut data = at.data.clone();
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + eps;
        let up = eval(&data)?;
        data[i] = orig - eps;
        let down = eval(&data)?;
        data[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(Error::NonFinite("grad_check"));
        }
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
