//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Maximum over all input coordinates of
/// `|analytic - central_difference| / max(1, |analytic|)`.
///
/// `f` builds a scalar from the recorded inputs; it is evaluated once with
/// gradients and twice per coordinate without.
pub fn grad_check<S, F>(f: F, inputs: &[Tensor<S>], h: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(&f, inputs)?;
    let two_h = h + h;
    let mut worst = S::zero();
    let mut probe: Vec<Tensor<S>> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = orig - h;
            let minus = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / two_h;
            let err = (grad[j] - numeric).abs() / S::one().max(grad[j].abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input convenience wrapper around [`grad_check`].
pub fn grad_check_one<S, F>(f: F, x: &Tensor<S>, h: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Var) -> Result<Var>,
{
    grad_check(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

fn analytic_grads<S, F>(f: &F, inputs: &[Tensor<S>]) -> Result<Vec<Vec<S>>>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    vars.iter()
        .map(|&v| {
            tape.grad(v)
                .map(<[S]>::to_vec)
                .ok_or_else(|| Error::Backward("missing leaf gradient".into()))
        })
        .collect()
}

fn evaluate<S, F>(f: &F, inputs: &[Tensor<S>]) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.value(loss).item()
}
