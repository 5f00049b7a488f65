//! Conditioning on diffusion time and speaker identity.
//!
//! [`AdaLn`] is a plain adaptive layer norm head producing one (scale, shift)
//! pair. [`AdaLnSola`] shares a single conditioning network across all blocks
//! and adds a zero-initialized rank-`r` per-block correction on top of it.

use crate::error::Result;
use crate::nn::{Bound, Builder, Init, Linear, ParamId, ParamStore};
use crate::tensor::{Activation, Tape, Tensor, Var};

use super::Conditioning;

const TIME_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10_000.0;

/// Sinusoidal embedding of `t` with `dim` entries: cosines then sines.
pub fn timestep_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp();
        let arg = TIME_SCALE * t * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    Tensor::from_vec(out)
}

/// Time embedding plus a learned speaker projection, shape `[1, dim]`.
#[derive(Debug, Clone)]
pub struct CondEmbed {
    speaker: Linear,
    dim: usize,
}

impl CondEmbed {
    pub fn new(bld: &mut Builder<'_>, speaker_dim: usize, dim: usize) -> Self {
        Self {
            speaker: Linear::new(bld, "speaker", speaker_dim, dim),
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, cond: &CondVars) -> Result<Var> {
        let temb = timestep_embedding(cond.t, self.dim).reshape(&[1, self.dim])?;
        let temb = tape.constant(temb)?;
        let spk = self.speaker.forward(tape, p, cond.speaker)?;
        tape.add(temb, spk)
    }
}

/// Conditioning placed on a tape: time is a plain scalar, the speaker
/// embedding is a `[1, D_s]` node.
#[derive(Debug, Clone, Copy)]
pub struct CondVars {
    pub t: f64,
    pub speaker: Var,
}

impl CondVars {
    pub fn constant(tape: &mut Tape, cond: &Conditioning) -> Result<Self> {
        let d = cond.speaker.len();
        Ok(Self {
            t: cond.t,
            speaker: tape.constant(cond.speaker.reshape(&[1, d])?)?,
        })
    }
}

/// Single-site adaptive layer norm head: `(scale, shift)` of width `width`.
#[derive(Debug, Clone)]
pub struct AdaLn {
    embed: CondEmbed,
    hidden: Linear,
    out: Linear,
    width: usize,
    act: Activation,
}

impl AdaLn {
    pub fn new(bld: &mut Builder<'_>, speaker_dim: usize, width: usize, act: Activation) -> Self {
        Self {
            embed: CondEmbed::new(bld, speaker_dim, width),
            hidden: Linear::new(bld, "hidden", width, width),
            out: Linear::zeros(bld, "out", width, 2 * width),
            width,
            act,
        }
    }

    /// Returns `(scale, shift)`, each `[width]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, cond: &CondVars) -> Result<(Var, Var)> {
        let e = self.embed.forward(tape, p, cond)?;
        let h = self.hidden.forward(tape, p, e)?;
        let h = tape.activation(h, self.act)?;
        let m = self.out.forward(tape, p, h)?;
        let m = tape.reshape(m, &[2 * self.width])?;
        Ok((
            tape.slice_rows(m, 0, self.width)?,
            tape.slice_rows(m, self.width, self.width)?,
        ))
    }
}

/// Scale, shift and gate for both sub-modules of one block, each `[width]`.
#[derive(Debug, Clone, Copy)]
pub struct Modulation {
    pub attn_shift: Var,
    pub attn_scale: Var,
    pub attn_gate: Var,
    pub ffn_shift: Var,
    pub ffn_scale: Var,
    pub ffn_gate: Var,
}

#[derive(Debug, Clone)]
struct LowRank {
    down: ParamId,
    up: ParamId,
}

/// Shared conditioning network with per-block low-rank adjustments.
#[derive(Debug, Clone)]
pub struct AdaLnSola {
    embed: CondEmbed,
    hidden: Linear,
    out: Linear,
    adjust: Vec<LowRank>,
    width: usize,
    act: Activation,
}

/// Shared state computed once per forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SolaShared {
    hidden: Var,
    base: Var,
}

impl AdaLnSola {
    pub fn new(
        bld: &mut Builder<'_>,
        speaker_dim: usize,
        width: usize,
        blocks: usize,
        rank: usize,
        act: Activation,
    ) -> Self {
        let embed = CondEmbed::new(bld, speaker_dim, width);
        let hidden = Linear::new(bld, "hidden", width, width);
        let out = Linear::zeros(bld, "out", width, 6 * width);
        let adjust = if rank == 0 {
            Vec::new()
        } else {
            (0..blocks)
                .map(|i| {
                    bld.scope(&format!("lowrank.{i}"), |b| LowRank {
                        down: b.param("down", &[width, rank], Init::FanIn { fan_in: width, gain: 1.0 }),
                        up: b.param("up", &[rank, 6 * width], Init::Zeros),
                    })
                })
                .collect()
        };
        Self {
            embed,
            hidden,
            out,
            adjust,
            width,
            act,
        }
    }

    pub fn rank(&self, store: &ParamStore) -> usize {
        self.adjust
            .first()
            .map_or(0, |lr| store.get(lr.down).shape()[1])
    }

    /// Zero the gate columns of the shared head and of every adjustment.
    pub fn zero_gates(&self, store: &mut ParamStore) {
        let w = self.width;
        let gates = [2 * w..3 * w, 5 * w..6 * w];
        let mut mats = vec![self.out.w];
        mats.extend(self.adjust.iter().map(|lr| lr.up));
        for id in mats {
            let t = store.get_mut(id);
            let cols = t.shape()[1];
            for row in t.data_mut().chunks_mut(cols) {
                for g in &gates {
                    row[g.clone()].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        if let Some(b) = self.out.b {
            let t = store.get_mut(b);
            for g in &gates {
                t.data_mut()[g.clone()].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn shared(&self, tape: &mut Tape, p: &Bound, cond: &CondVars) -> Result<SolaShared> {
        let e = self.embed.forward(tape, p, cond)?;
        let h = self.hidden.forward(tape, p, e)?;
        let hidden = tape.activation(h, self.act)?;
        let base = self.out.forward(tape, p, hidden)?;
        Ok(SolaShared { hidden, base })
    }

    /// Modulation for block `index`: shared base plus its low-rank correction.
    pub fn modulation(
        &self,
        tape: &mut Tape,
        p: &Bound,
        shared: &SolaShared,
        index: usize,
    ) -> Result<Modulation> {
        let m = match self.adjust.get(index) {
            Some(lr) => {
                let z = tape.linear(shared.hidden, p.get(lr.down), None)?;
                let delta = tape.linear(z, p.get(lr.up), None)?;
                tape.add(shared.base, delta)?
            }
            None => shared.base,
        };
        let w = self.width;
        let m = tape.reshape(m, &[6 * w])?;
        let mut parts = [m; 6];
        for (i, part) in parts.iter_mut().enumerate() {
            *part = tape.slice_rows(m, i * w, w)?;
        }
        Ok(Modulation {
            attn_shift: parts[0],
            attn_scale: parts[1],
            attn_gate: parts[2],
            ffn_shift: parts[3],
            ffn_scale: parts[4],
            ffn_gate: parts[5],
        })
    }
}

/// `layer_norm(x) * (1 + scale) + shift` for `x[S, C, T]`, normalizing over
/// `C` per subspace and frame, with `scale`/`shift` of length `S * C`.
pub fn modulate(tape: &mut Tape, x: Var, scale: Var, shift: Var) -> Result<Var> {
    let n = norm_channels(tape, x)?;
    scale_shift(tape, n, scale, shift)
}

/// Channel-wise `x * (1 + scale) + shift` with no normalization.
pub fn scale_shift(tape: &mut Tape, x: Var, scale: Var, shift: Var) -> Result<Var> {
    let one_plus = tape.add_scalar(scale, 1.0)?;
    let y = tape.mul_rows(x, one_plus)?;
    tape.add_rows(y, shift)
}

/// Parameter-free layer norm over axis 1 of `[S, C, T]`.
pub fn norm_channels(tape: &mut Tape, x: Var) -> Result<Var> {
    let xt = tape.permute(x, &[0, 2, 1])?;
    let n = tape.layer_norm(xt, None, None, crate::nn::LN_EPS)?;
    tape.permute(n, &[0, 2, 1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_at_zero() {
        let e = timestep_embedding(0.0, 6);
        assert_eq!(e.data(), &[1., 1., 1., 0., 0., 0.]);
    }

    #[test]
    fn embedding_is_bounded_and_distinguishes_times() {
        let a = timestep_embedding(0.3, 16);
        let b = timestep_embedding(0.31, 16);
        assert!(a.max_abs() <= 1.0);
        assert!(a.sub(&b).unwrap().norm() > 1e-3);
    }
}
