//! Diffusion convolution block: convolutional attention followed by a
//! convolutional feedforward, both gated residuals.

use crate::error::Result;
use crate::nn::{Bound, Builder, Conv1d, Init, ParamId};
use crate::tensor::{Activation, Tape};

use super::adaln::{modulate, Modulation};
use super::{BackboneConfig, SubspaceTensor};

/// Depthwise (subspace x time) convolution whose output gates a value
/// projection through a Hadamard product.
#[derive(Debug, Clone)]
pub struct ConvAttention {
    pre: Conv1d,
    depthwise: ParamId,
    value: Conv1d,
    proj: Conv1d,
}

impl ConvAttention {
    pub fn new(bld: &mut Builder<'_>, cfg: &BackboneConfig) -> Self {
        let c = cfg.sub_channels;
        bld.scope("attn", |b| Self {
            pre: Conv1d::same(b, "pre", c, c, 1),
            depthwise: b.param(
                "depthwise",
                &[c, cfg.kernel_sub, cfg.kernel_time],
                Init::FanIn {
                    fan_in: cfg.kernel_sub * cfg.kernel_time,
                    gain: 1.0,
                },
            ),
            value: Conv1d::same(b, "value", c, c, 1),
            proj: Conv1d::same(b, "proj", c, c, 1),
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: SubspaceTensor,
        m: &Modulation,
    ) -> Result<SubspaceTensor> {
        let u = modulate(tape, x.var(), m.attn_scale, m.attn_shift)?;
        // [S, C, T] -> [C, S, T] so each channel sees a (subspace, time) plane
        let a = self.pre.forward(tape, p, u)?;
        let a = tape.permute(a, &[1, 0, 2])?;
        let a = tape.depthwise_conv2d(a, p.get(self.depthwise))?;
        let a = tape.permute(a, &[1, 0, 2])?;
        let v = self.value.forward(tape, p, u)?;
        let av = tape.mul(a, v)?;
        let o = self.proj.forward(tape, p, av)?;
        let o = tape.mul_rows(o, m.attn_gate)?;
        Ok(SubspaceTensor::wrap(tape.add(x.var(), o)?))
    }
}

/// Per-subspace temporal convolution expanding to `ffn_expand_dim` channels
/// and projecting back, weights shared across subspaces.
#[derive(Debug, Clone)]
pub struct ConvFfn {
    expand: Conv1d,
    contract: Conv1d,
    act: Activation,
}

impl ConvFfn {
    pub fn new(bld: &mut Builder<'_>, cfg: &BackboneConfig) -> Self {
        bld.scope("ffn", |b| Self {
            expand: Conv1d::same(b, "expand", cfg.sub_channels, cfg.ffn_expand_dim, cfg.ffn_kernel),
            contract: Conv1d::same(b, "contract", cfg.ffn_expand_dim, cfg.sub_channels, 1),
            act: cfg.activation,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: SubspaceTensor,
        m: &Modulation,
    ) -> Result<SubspaceTensor> {
        let u = modulate(tape, x.var(), m.ffn_scale, m.ffn_shift)?;
        let h = self.expand.forward(tape, p, u)?;
        let h = tape.activation(h, self.act)?;
        let o = self.contract.forward(tape, p, h)?;
        let o = tape.mul_rows(o, m.ffn_gate)?;
        Ok(SubspaceTensor::wrap(tape.add(x.var(), o)?))
    }
}

#[derive(Debug, Clone)]
pub struct Dicb {
    pub attn: ConvAttention,
    pub ffn: ConvFfn,
}

impl Dicb {
    pub fn new(bld: &mut Builder<'_>, cfg: &BackboneConfig) -> Self {
        Self {
            attn: ConvAttention::new(bld, cfg),
            ffn: ConvFfn::new(bld, cfg),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: SubspaceTensor,
        m: &Modulation,
    ) -> Result<SubspaceTensor> {
        let x = self.attn.forward(tape, p, x, m)?;
        self.ffn.forward(tape, p, x, m)
    }
}
