//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::nn::Parameters;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
    let out = f(&mut tape, &vars);
    tape.scalar(out)
}

/// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)` over every
/// coordinate of every input.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::Contract(format!("step {step} outside [1e-7, 1e-3]")));
    }
    let first = evaluate(&f, inputs);
    let second = evaluate(&f, inputs);
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism(format!(
            "two evaluations gave {first} and {second}"
        )));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.tensor(*v);
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            probe[i].data_mut()[k] = orig + step;
            let up = evaluate(&f, &probe);
            probe[i].data_mut()[k] = orig - step;
            let down = evaluate(&f, &probe);
            probe[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// [`gradcheck`] over a model's stored parameters. `loss` builds the scalar
/// on a fresh tape and returns it with the trainable parameter vars in
/// [`Parameters::parameters`] order. Numeric derivatives perturb the
/// model's tensors directly.
pub fn gradcheck_model<M, F>(model: &M, loss: F, step: f64) -> Result<f64>
where
    M: Parameters + Clone,
    F: Fn(&M, &mut Tape) -> (Var, Vec<Var>),
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::Contract(format!("step {step} outside [1e-7, 1e-3]")));
    }
    let value = |m: &M| {
        let mut tape = Tape::new();
        let (out, _) = loss(m, &mut tape);
        tape.scalar(out)
    };
    let mut tape = Tape::new();
    let (out, vars) = loss(model, &mut tape);
    let count = model.parameters().len();
    if vars.len() != count {
        return Err(Error::Contract(format!("{} vars for {count} parameter tensors", vars.len())));
    }
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.tensor(*v);
        for k in 0..analytic.len() {
            let orig = probe.parameters_mut()[i].data()[k];
            probe.parameters_mut()[i].data_mut()[k] = orig + step;
            let up = value(&probe);
            probe.parameters_mut()[i].data_mut()[k] = orig - step;
            let down = value(&probe);
            probe.parameters_mut()[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[k];
            worst = worst.max((a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs()));
        }
    }
    Ok(worst)
}
