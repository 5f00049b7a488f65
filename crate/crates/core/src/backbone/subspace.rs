//! Temporal upsampling, subspace decomposition and recomposition.

use crate::error::{Error, Result};
use crate::nn::{Bound, Builder, Conv1d, ConvTranspose1d, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Activation, Tape, Tensor, Var};

use super::adaln::{modulate, scale_shift, AdaLn, CondVars};
use super::{BackboneConfig, SubspaceTensor};

/// Learned transposed convolution raising the visual frame rate by
/// `upsample_factor` (kernel length twice the factor).
#[derive(Debug, Clone)]
pub struct Upsampler {
    pub conv: ConvTranspose1d,
}

impl Upsampler {
    pub fn new(bld: &mut Builder<'_>, cfg: &BackboneConfig) -> Self {
        let f = cfg.upsample_factor;
        Self {
            conv: ConvTranspose1d::new(bld, "upsample", cfg.visual_dim, cfg.visual_dim, 2 * f, f),
        }
    }

    /// Overwrite the kernel with a per-channel nearest-neighbour repeat, which
    /// for factor 1 is the delta kernel and hence the identity.
    pub fn init_nearest(&self, store: &mut ParamStore) {
        let k = store.get_mut(self.conv.kernel);
        let (c, _, klen) = (k.shape()[0], k.shape()[1], k.shape()[2]);
        let f = self.conv.stride;
        let crop = klen.saturating_sub(f) / 2;
        let data = k.data_mut();
        data.iter_mut().for_each(|v| *v = 0.0);
        for ch in 0..c {
            for j in crop..(crop + f).min(klen) {
                data[(ch * c + ch) * klen + j] = 1.0;
            }
        }
    }

    /// `visual[T_v, D_v]` to `[D_v, T_v * factor]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, visual: Var) -> Result<Var> {
        let v = tape.transpose(visual)?;
        self.conv.forward(tape, p, v)
    }
}

#[derive(Debug, Clone)]
struct Stream {
    norm: LayerNorm,
    conv: Conv1d,
}

/// Splits `[x_t ; visual]` channels into `S` groups, each with its own layer
/// norm and convolution to `C_sub` channels.
#[derive(Debug, Clone)]
pub struct Decomposition {
    streams: Vec<Stream>,
    group: usize,
    adaln: AdaLn,
}

impl Decomposition {
    pub fn new(bld: &mut Builder<'_>, cfg: &BackboneConfig) -> Self {
        let group = (cfg.latent_dim + cfg.visual_dim) / cfg.subspaces;
        bld.scope("decompose", |b| {
            let streams = (0..cfg.subspaces)
                .map(|s| {
                    b.scope(&format!("stream.{s}"), |b| Stream {
                        norm: LayerNorm::new(b, "norm", group),
                        conv: Conv1d::same(b, "conv", group, cfg.sub_channels, cfg.stream_kernel),
                    })
                })
                .collect();
            let adaln = b.scope("adaln", |b| AdaLn::new(b, cfg.speaker_dim, cfg.width(), cfg.activation));
            Self { streams, group, adaln }
        })
    }

    /// Per-stream features before conditioning, `[S, C_sub, T]`.
    pub fn streams(&self, tape: &mut Tape, p: &Bound, x_t: Var, v_up: Var) -> Result<Var> {
        let xs = tape.shape(x_t).to_vec();
        let vs = tape.shape(v_up).to_vec();
        if xs[0] != vs[1] {
            return Err(Error::Contract(format!(
                "latent length {} does not match upsampled visual length {}",
                xs[0], vs[1]
            )));
        }
        let t_len = xs[0];
        let xc = tape.transpose(x_t)?;
        let joint = tape.concat(&[xc, v_up])?;
        let mut outs = Vec::with_capacity(self.streams.len());
        for (s, st) in self.streams.iter().enumerate() {
            let g = tape.slice_rows(joint, s * self.group, self.group)?;
            let g = tape.transpose(g)?;
            let g = st.norm.forward(tape, p, g)?;
            let g = tape.transpose(g)?;
            outs.push(st.conv.forward(tape, p, g)?);
        }
        let c = tape.shape(outs[0])[0];
        let stacked = tape.concat(&outs)?;
        tape.reshape(stacked, &[self.streams.len(), c, t_len])
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x_t: Var,
        v_up: Var,
        cond: &CondVars,
    ) -> Result<SubspaceTensor> {
        let h = self.streams(tape, p, x_t, v_up)?;
        let (scale, shift) = self.adaln.forward(tape, p, cond)?;
        Ok(SubspaceTensor::wrap(scale_shift(tape, h, scale, shift)?))
    }
}

#[derive(Debug, Clone)]
struct ConvNextBlock {
    depthwise: ParamId,
    depthwise_bias: ParamId,
    norm: LayerNorm,
    expand: Linear,
    contract: Linear,
}

/// Conditioned projection of each stream, concatenation, ConvNeXt fusion and
/// a zero-initialized output projection to the latent dimension.
#[derive(Debug, Clone)]
pub struct Recomposition {
    adaln: AdaLn,
    streams: Vec<Conv1d>,
    convnext: Vec<ConvNextBlock>,
    out: Linear,
    act: Activation,
}

impl Recomposition {
    pub fn new(bld: &mut Builder<'_>, cfg: &BackboneConfig) -> Self {
        let fused = cfg.subspaces * cfg.recomp_proj_dim;
        bld.scope("recompose", |b| {
            let adaln = b.scope("adaln", |b| AdaLn::new(b, cfg.speaker_dim, cfg.width(), cfg.activation));
            let streams = (0..cfg.subspaces)
                .map(|s| {
                    Conv1d::same(
                        b,
                        &format!("stream.{s}"),
                        cfg.sub_channels,
                        cfg.recomp_proj_dim,
                        cfg.stream_kernel,
                    )
                })
                .collect();
            let convnext = (0..cfg.convnext_layers)
                .map(|i| {
                    b.scope(&format!("convnext.{i}"), |b| ConvNextBlock {
                        depthwise: b.param(
                            "depthwise",
                            &[fused, 1, cfg.convnext_kernel],
                            Init::FanIn {
                                fan_in: cfg.convnext_kernel,
                                gain: 1.0,
                            },
                        ),
                        depthwise_bias: b.param("depthwise_bias", &[fused], Init::Zeros),
                        norm: LayerNorm::new(b, "norm", fused),
                        expand: Linear::new(b, "expand", fused, cfg.convnext_hidden),
                        contract: Linear::new(b, "contract", cfg.convnext_hidden, fused),
                    })
                })
                .collect();
            let out = Linear::zeros(b, "out", fused, cfg.latent_dim);
            Self {
                adaln,
                streams,
                convnext,
                out,
                act: cfg.activation,
            }
        })
    }

    /// `[S, C_sub, T]` to a velocity `[T, D_a]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: SubspaceTensor,
        cond: &CondVars,
    ) -> Result<Var> {
        let (scale, shift) = self.adaln.forward(tape, p, cond)?;
        let u = modulate(tape, x.var(), scale, shift)?;
        let shape = tape.shape(u).to_vec();
        let (c, t_len) = (shape[1], shape[2]);
        let mut outs = Vec::with_capacity(self.streams.len());
        for (s, conv) in self.streams.iter().enumerate() {
            let xs = tape.slice_rows(u, s, 1)?;
            let xs = tape.reshape(xs, &[c, t_len])?;
            outs.push(conv.forward(tape, p, xs)?);
        }
        let mut h = tape.concat(&outs)?;
        let fused = tape.shape(h)[0];
        for blk in &self.convnext {
            let y = tape.reshape(h, &[fused, 1, t_len])?;
            let y = tape.depthwise_conv2d(y, p.get(blk.depthwise))?;
            let y = tape.reshape(y, &[fused, t_len])?;
            let y = tape.add_rows(y, p.get(blk.depthwise_bias))?;
            let y = tape.transpose(y)?;
            let y = blk.norm.forward(tape, p, y)?;
            let y = blk.expand.forward(tape, p, y)?;
            let y = tape.activation(y, self.act)?;
            let y = blk.contract.forward(tape, p, y)?;
            let y = tape.transpose(y)?;
            h = tape.add(h, y)?;
        }
        let ht = tape.transpose(h)?;
        self.out.forward(tape, p, ht)
    }
}

/// Nearest-neighbour upsampling of `[T_v, D_v]` rows, used as a reference.
pub fn repeat_frames(visual: &Tensor, factor: usize) -> Result<Tensor> {
    let (t, d) = (visual.shape()[0], visual.shape()[1]);
    let mut out = Vec::with_capacity(t * factor * d);
    for i in 0..t {
        for _ in 0..factor {
            out.extend_from_slice(&visual.data()[i * d..(i + 1) * d]);
        }
    }
    Tensor::new(&[t * factor, d], out)
}
