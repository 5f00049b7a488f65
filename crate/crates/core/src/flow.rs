//! Straight probability path, the flow-matching objective and the Euler
//! sampler.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Training times are drawn from `[0, 1 - EPS_T]`, keeping the `1/(1-t)^2`
/// weight finite.
pub const EPS_T: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: f64,
    pub x_t: Tensor,
}

impl FlowState {
    /// Ground-truth velocity `x1 - x0`, constant along the path.
    pub fn target_velocity(&self) -> Tensor {
        self.x1.sub(&self.x0).expect("path endpoints share a shape")
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Contract(format!("time {t} outside [0, 1]")))
    }
}

pub fn sample_path(x0: &Tensor, x1: &Tensor, t: f64) -> Result<FlowState> {
    check_time(t)?;
    let x_t = x0.zip_map(x1, |a, b| (1.0 - t) * a + t * b)?;
    Ok(FlowState {
        x0: x0.clone(),
        x1: x1.clone(),
        t,
        x_t,
    })
}

/// Data prediction `x_t + (1 - t) v`.
pub fn d_from_v(x_t: &Tensor, v: &Tensor, t: f64) -> Result<Tensor> {
    check_time(t)?;
    x_t.zip_map(v, |x, v| x + (1.0 - t) * v)
}

/// [`d_from_v`] on a tape.
pub fn d_from_v_var(tape: &mut Tape, x_t: Var, v: Var, t: f64) -> Result<Var> {
    check_time(t)?;
    let sv = tape.scale(v, 1.0 - t)?;
    tape.add(x_t, sv)
}

fn check_clamp(t: f64) -> Result<()> {
    if t > 1.0 - EPS_T || t < 0.0 {
        return Err(Error::Contract(format!(
            "flow-matching loss needs t in [0, {}], got {t}",
            1.0 - EPS_T
        )));
    }
    Ok(())
}

/// Weighted data-prediction loss, evaluated as `mean (v - (x1 - x0))^2`.
pub fn fm_loss(tape: &mut Tape, v_pred: Var, state: &FlowState) -> Result<Var> {
    check_clamp(state.t)?;
    let target = tape.constant(state.target_velocity())?;
    tape.mse(v_pred, target)
}

/// `mean (d - x1)^2 / (1 - t)^2` computed literally, for cross-checking.
pub fn fm_loss_weighted(v_pred: &Tensor, state: &FlowState) -> Result<f64> {
    check_clamp(state.t)?;
    let d = d_from_v(&state.x_t, v_pred, state.t)?;
    let w = (1.0 - state.t).powi(2);
    Ok(d.sub(&state.x1)?.map(|e| e * e / w).mean())
}

pub fn sample_t<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>() * (1.0 - EPS_T)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub nfe: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { nfe: 10 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nfe == 0 {
            return Err(Error::Config("sampler.nfe must be at least 1".into()));
        }
        Ok(())
    }
}

/// Integrate `dx/dt = field(x, t)` from `t = 0` to `t = 1` with `nfe` forward
/// Euler steps on a uniform grid.
pub fn euler_sample<F>(mut field: F, x0: &Tensor, sampler: SamplerConfig) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    sampler.validate()?;
    let dt = 1.0 / sampler.nfe as f64;
    let mut x = x0.clone();
    for k in 0..sampler.nfe {
        let t = k as f64 / sampler.nfe as f64;
        let v = field(&x, t)?;
        x = x.zip_map(&v, |a, b| a + b * dt)?;
        if !x.is_finite() {
            return Err(Error::Divergence { step: k });
        }
    }
    Ok(x)
}
