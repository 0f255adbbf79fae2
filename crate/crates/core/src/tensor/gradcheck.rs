//! Central finite-difference gradient verification.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Compare analytic gradients of `f` against central finite differences at
/// `x`. Returns the maximum over components of
/// `|analytic - numeric| / max(1, |analytic|)`.
///
/// `f` must be deterministic and produce a scalar.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    grad_check_multi(
        |tape, ids| f(tape, ids[0]),
        std::slice::from_ref(x),
        eps,
    )
}

/// Multi-input variant of [`grad_check`]; gradients of every input are
/// verified.
pub fn grad_check_multi<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    if eps <= 0.0 {
        return Err(Error::Precondition(format!(
            "grad_check step must be positive, got {eps}"
        )));
    }

    let eval = |tensors: &[Tensor]| -> Result<(Tape, Vec<TensorId>, TensorId)> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = tensors
            .iter()
            .map(|t| tape.var(t.clone()))
            .collect();
        let out = f(&mut tape, &ids)?;
        if !tape.value(out).is_scalar() {
            return Err(Error::Contract(format!(
                "grad_check function must return a scalar, got shape {:?}",
                tape.shape(out)
            )));
        }
        Ok((tape, ids, out))
    };

    let (mut tape, ids, out) = eval(inputs)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut worst = 0.0_f64;
    let mut perturbed: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ci in 0..input.data.len() {
            let orig = input.data[ci];

            perturbed[ti].data[ci] = orig + eps;
            let (plus_tape, _, plus_out) = eval(&perturbed)?;
            let plus = plus_tape.data(plus_out)[0];

            perturbed[ti].data[ci] = orig - eps;
            let (minus_tape, _, minus_out) = eval(&perturbed)?;
            let minus = minus_tape.data(minus_out)[0];

            perturbed[ti].data[ci] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti].get(ci).copied().unwrap_or(0.0);
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
