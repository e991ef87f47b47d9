//! Central finite-difference gradient checking.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `eps`.
///
/// `f` receives a fresh `F64` tape and one leaf per entry of `inputs`.
/// Returns the maximum over every input element of
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars)?;
        tape.backward(out)?;
        vars.iter().zip(inputs).map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape()))).collect::<Vec<_>>()
    };

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value();
        if v.len() != 1 {
            return Err(Error::Backward(format!("grad_check needs a scalar function, got {:?}", v.shape())));
        }
        Ok(v.data()[0])
    };

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[k].data()[i];
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
