//! Central finite-difference verification of recorded adjoints.

use super::tape::{OpKind, Tape, Var};
use super::tensor::Tensor;
use crate::error::{ensure, Result};

/// Step used by every gradient check in this crate.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Relative error threshold a primitive must stay under.
pub const TOLERANCE: f64 = 1e-4;

/// Largest `|analytic − numeric| / max(1e-8, |numeric|)` over every element
/// of every input, where `numeric` is the central difference with step `eps`.
///
/// `build` receives one leaf per input and must return a scalar.
pub fn grad_check<F>(inputs: &[Tensor], eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with_fault(inputs, eps, None, build)
}

#[doc(hidden)]
pub fn grad_check_with_fault<F>(
    inputs: &[Tensor],
    eps: f64,
    fault: Option<OpKind>,
    build: F,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    ensure!(eps > 0.0, "grad_check: step must be positive");
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_adjoint_fault(kind);
    }
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &leaves)?;
    let grads = tape.backward(out)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &leaves)?;
        Ok(tape.value(out).data()[0])
    };

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, &leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(leaf).expect("leaf requires grad").clone();
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic.data()[e] - numeric).abs() / numeric.abs().max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
