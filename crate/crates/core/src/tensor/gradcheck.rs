//! Central finite-difference checking of tape gradients.

use serde::Serialize;

use super::{Precision, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome for one differentiated input.
#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub checked: usize,
    /// `max |analytic - numeric| / max(|analytic|_inf, |numeric|_inf)` over the
    /// checked entries; zero when both gradients vanish.
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Compare the tape gradient of `loss_fn` against central differences.
///
/// `loss_fn` receives a fresh 64-bit tape and one leaf per input (in order)
/// and must return a scalar. `max_entries` caps the number of perturbed
/// entries per tensor (evenly strided); `None` checks every entry.
pub fn check<F>(
    inputs: &[(String, Tensor)],
    loss_fn: F,
    step: f64,
    max_entries: Option<usize>,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_with(inputs, loss_fn, step, max_entries, |_| {})
}

pub(crate) fn check_with<F, P>(
    inputs: &[(String, Tensor)],
    loss_fn: F,
    step: f64,
    max_entries: Option<usize>,
    prepare: P,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    P: Fn(&mut Tape),
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new(Precision::F64);
        let vars = values
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = loss_fn(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new(Precision::F64);
    prepare(&mut tape);
    let vars = inputs
        .iter()
        .map(|(_, t)| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = loss_fn(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::Contract("gradcheck loss must be scalar".into()));
    }
    let analytic = tape.grad(loss, &vars)?;
    drop(tape);

    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut tensors = Vec::with_capacity(inputs.len());
    for (ti, (name, t)) in inputs.iter().enumerate() {
        let n = t.len();
        let stride = match max_entries {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut max_abs: f64 = 0.0;
        let mut worst = 0;
        let mut scale: f64 = 0.0;
        let mut checked = 0;
        for i in (0..n).step_by(stride) {
            let orig = values[ti].data()[i];
            values[ti].data_mut()[i] = orig + step;
            let up = eval(&values)?;
            values[ti].data_mut()[i] = orig - step;
            let down = eval(&values)?;
            values[ti].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[ti].data()[i];
            let err = (a - numeric).abs();
            if err > max_abs {
                max_abs = err;
                worst = i;
            }
            scale = scale.max(a.abs()).max(numeric.abs());
            checked += 1;
        }
        let rel_err = if scale > 0.0 { max_abs / scale } else { 0.0 };
        tensors.push(TensorCheck {
            name: name.clone(),
            numel: n,
            checked,
            rel_err,
            max_abs_err: max_abs,
            worst_index: worst,
        });
    }
    Ok(GradcheckReport { step, tensors })
}
