//! Central finite-difference verification of tape gradients.
//!
//! Every differentiable path in this crate is ultimately checked against
//! the oracle in this module: perturb one input entry at a time, evaluate
//! the function twice on fresh tapes, and compare the centered difference
//! against the recorded gradient.

use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

/// Maximum relative error between the tape gradient of `f` at `x` and a
/// central finite difference with step `eps`.
///
/// The error metric is `|ad - fd| / max(1, |ad|)`, maximized over entries.
/// `f` must be deterministic and produce a scalar.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// Multi-input variant of [`grad_check`]: checks the gradient with respect
/// to every entry of every input tensor.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");

    let tracked: Vec<Tensor> = inputs
        .iter()
        .map(|t| t.clone().requiring_grad(true))
        .collect();

    // One analytic pass.
    let grads: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = tracked.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&tape, &vars)?;
        let out_shape = out.shape();
        if !out_shape.is_empty() {
            return Err(TensorError::NonScalarLoss { shape: out_shape });
        }
        tape.backward(out)?;
        vars.iter().map(|v| v.grad()).collect()
    };

    let eval = |points: &[Tensor]| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = points.iter().map(|t| tape.leaf(t)).collect();
        Ok(f(&tape, &vars)?.scalar_value())
    };

    let mut worst = 0.0f64;
    let mut points = tracked.clone();
    for (which, grad) in grads.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = points[which].data()[i];
            points[which].data_mut()[i] = orig + eps;
            let plus = eval(&points)?;
            points[which].data_mut()[i] = orig - eps;
            let minus = eval(&points)?;
            points[which].data_mut()[i] = orig;

            let fd = (plus - minus) / (2.0 * eps);
            let ad = grad[i];
            let rel = (ad - fd).abs() / ad.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
