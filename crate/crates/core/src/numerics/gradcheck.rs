//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Errors above this are re-probed with a tenfold smaller step.
const RETRY_ABOVE: f64 = 1e-6;

pub(crate) fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Relative error of one coordinate, where `at(δ)` evaluates the function with
/// that coordinate shifted by `δ`. A ReLU kink inside the `±step` stencil
/// biases the central difference; such coordinates pass at `step/10`, while a
/// wrong adjoint fails at both steps.
pub(crate) fn probe_error(
    analytic: f64,
    step: f64,
    mut at: impl FnMut(f64) -> Result<f64>,
) -> Result<f64> {
    let mut central = |h: f64| -> Result<f64> { Ok((at(h)? - at(-h)?) / (2.0 * h)) };
    let err = relative_error(analytic, central(step)?);
    if err <= RETRY_ABOVE {
        return Ok(err);
    }
    Ok(err.min(relative_error(analytic, central(step / 10.0)?)))
}

/// Max over coordinates of `|analytic − numeric| / max(1, |analytic|, |numeric|)`
/// for a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), step, None)
}

/// Like [`grad_check`] over several inputs. With `max_coords = Some(n)` at most
/// `n` evenly spaced coordinates of each input are probed.
pub fn grad_check_many<F>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    max_coords: Option<usize>,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Contract(format!(
            "step must be positive, got {step}"
        )));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::Contract("grad_check needs a scalar function".into()));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]);
        let n = input.len();
        let stride = match max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = input.data()[i];
            let err = probe_error(analytic.data()[i], step, |d| {
                probe[k].data_mut()[i] = orig + d;
                let v = eval(&probe);
                probe[k].data_mut()[i] = orig;
                v
            })?;
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
