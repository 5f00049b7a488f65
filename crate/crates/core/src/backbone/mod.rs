//! Hierarchical subspace velocity network.
//!
//! `x_t [T_a, D_a]` and visual features `[T_v, D_v]` go through
//! upsampling, decomposition into `S` streams, a stack of DiCBs and
//! recomposition, returning a velocity `[T_a, D_a]`.

pub mod adaln;
pub mod dicb;
pub mod subspace;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Builder, ParamStore};
use crate::rng::StreamRng;
use crate::tensor::{Activation, Precision, Tape, Tensor, Var};

pub use adaln::{AdaLn, AdaLnSola, CondVars, Modulation};
pub use dicb::Dicb;
pub use subspace::{Decomposition, Recomposition, Upsampler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub subspaces: usize,
    pub blocks: usize,
    pub sub_channels: usize,
    pub visual_dim: usize,
    pub latent_dim: usize,
    pub speaker_dim: usize,
    pub kernel_time: usize,
    pub kernel_sub: usize,
    pub ffn_kernel: usize,
    pub ffn_expand_dim: usize,
    pub adaln_rank: usize,
    pub recomp_proj_dim: usize,
    pub convnext_layers: usize,
    pub convnext_hidden: usize,
    pub convnext_kernel: usize,
    /// Kernel of the per-stream convolutions in decomposition and recomposition.
    pub stream_kernel: usize,
    pub upsample_factor: usize,
    pub activation: Activation,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    pub fn desk() -> Self {
        Self {
            subspaces: 4,
            blocks: 4,
            sub_channels: 16,
            visual_dim: 32,
            latent_dim: 16,
            speaker_dim: 8,
            kernel_time: 5,
            kernel_sub: 7,
            ffn_kernel: 3,
            ffn_expand_dim: 32,
            adaln_rank: 4,
            recomp_proj_dim: 8,
            convnext_layers: 2,
            convnext_hidden: 64,
            convnext_kernel: 7,
            stream_kernel: 3,
            upsample_factor: 2,
            activation: Activation::Gelu,
        }
    }

    /// Small enough for an every-entry finite-difference check.
    pub fn tiny() -> Self {
        Self {
            subspaces: 2,
            blocks: 2,
            sub_channels: 4,
            visual_dim: 8,
            latent_dim: 8,
            speaker_dim: 4,
            ffn_expand_dim: 16,
            adaln_rank: 2,
            recomp_proj_dim: 4,
            convnext_layers: 1,
            convnext_hidden: 8,
            convnext_kernel: 3,
            ..Self::desk()
        }
    }

    /// Published architecture constants. The latent width is that of the
    /// codec latents and is not fixed by the architecture.
    pub fn paper() -> Self {
        Self {
            subspaces: 8,
            blocks: 12,
            sub_channels: 128,
            visual_dim: 1024,
            latent_dim: 128,
            speaker_dim: 256,
            kernel_time: 5,
            kernel_sub: 7,
            ffn_kernel: 3,
            ffn_expand_dim: 1024,
            adaln_rank: 32,
            recomp_proj_dim: 128,
            convnext_layers: 3,
            convnext_hidden: 512,
            convnext_kernel: 7,
            stream_kernel: 3,
            upsample_factor: 2,
            activation: Activation::Gelu,
        }
    }

    /// Trunk channel width `S * C_sub`.
    pub fn width(&self) -> usize {
        self.subspaces * self.sub_channels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("subspaces", self.subspaces),
            ("sub_channels", self.sub_channels),
            ("visual_dim", self.visual_dim),
            ("latent_dim", self.latent_dim),
            ("speaker_dim", self.speaker_dim),
            ("ffn_expand_dim", self.ffn_expand_dim),
            ("recomp_proj_dim", self.recomp_proj_dim),
            ("convnext_hidden", self.convnext_hidden),
            ("upsample_factor", self.upsample_factor),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        let odd = [
            ("kernel_time", self.kernel_time),
            ("kernel_sub", self.kernel_sub),
            ("ffn_kernel", self.ffn_kernel),
            ("convnext_kernel", self.convnext_kernel),
            ("stream_kernel", self.stream_kernel),
        ];
        for (name, v) in odd {
            if v % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {v}")));
            }
        }
        let joint = self.latent_dim + self.visual_dim;
        if joint % self.subspaces != 0 {
            return Err(Error::Config(format!(
                "latent_dim + visual_dim = {joint} is not divisible by subspaces = {}",
                self.subspaces
            )));
        }
        Ok(())
    }

    /// Latent frames on either side of an output frame that can influence it.
    pub fn receptive_radius(&self) -> usize {
        let f = self.upsample_factor;
        2 * f
            + 2 * (self.stream_kernel / 2)
            + self.blocks * (self.kernel_time / 2 + self.ffn_kernel / 2)
            + self.convnext_layers * (self.convnext_kernel / 2)
    }
}

/// Diffusion time and speaker embedding `[D_s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub t: f64,
    pub speaker: Tensor,
}

impl Conditioning {
    pub fn new(t: f64, speaker: Tensor) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Contract(format!("time {t} outside [0, 1]")));
        }
        if !speaker.is_finite() {
            return Err(Error::NonFinite { op: "conditioning" });
        }
        Ok(Self { t, speaker })
    }
}

/// Tape node holding `[S, C_sub, T]` features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubspaceTensor(Var);

impl SubspaceTensor {
    pub fn wrap(v: Var) -> Self {
        Self(v)
    }

    pub fn var(self) -> Var {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    pub upsample: Upsampler,
    pub decompose: Decomposition,
    pub sola: AdaLnSola,
    pub blocks: Vec<Dicb>,
    pub recompose: Recomposition,
}

impl Backbone {
    /// Register all parameters in `store` (names prefixed `backbone.`).
    pub fn new(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut StreamRng) -> Result<Self> {
        cfg.validate()?;
        let mut bld = Builder::new(store, rng);
        let net = bld.scope("backbone", |b| {
            let upsample = Upsampler::new(b, cfg);
            let decompose = Decomposition::new(b, cfg);
            let sola = b.scope("sola", |b| {
                AdaLnSola::new(b, cfg.speaker_dim, cfg.width(), cfg.blocks, cfg.adaln_rank, cfg.activation)
            });
            let blocks = (0..cfg.blocks)
                .map(|i| b.scope(&format!("block.{i}"), |b| Dicb::new(b, cfg)))
                .collect();
            let recompose = Recomposition::new(b, cfg);
            Self {
                cfg: cfg.clone(),
                upsample,
                decompose,
                sola,
                blocks,
                recompose,
            }
        });
        net.upsample.init_nearest(store);
        Ok(net)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Velocity `[T_a, D_a]` for `x_t [T_a, D_a]` and `visual [T_v, D_v]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x_t: Var, visual: Var, cond: &CondVars) -> Result<Var> {
        let cfg = &self.cfg;
        let xs = tape.shape(x_t).to_vec();
        let vs = tape.shape(visual).to_vec();
        if xs.len() != 2 || xs[1] != cfg.latent_dim {
            return crate::error::shape_err("backbone latent", &xs, &[0, cfg.latent_dim]);
        }
        if vs.len() != 2 || vs[1] != cfg.visual_dim {
            return crate::error::shape_err("backbone visual", &vs, &[0, cfg.visual_dim]);
        }
        if xs[0] != vs[0] * cfg.upsample_factor {
            return Err(Error::Contract(format!(
                "latent length {} != visual length {} x upsample factor {}",
                xs[0], vs[0], cfg.upsample_factor
            )));
        }
        let sp = tape.shape(cond.speaker).to_vec();
        if sp != [1, cfg.speaker_dim] {
            return crate::error::shape_err("backbone speaker", &sp, &[1, cfg.speaker_dim]);
        }
        let v_up = self.upsample.forward(tape, p, visual)?;
        let h = self.decompose.forward(tape, p, x_t, v_up, cond)?;
        let h = self.forward_blocks(tape, p, h, cond)?;
        self.recompose.forward(tape, p, h, cond)
    }

    /// The DiCB stack alone.
    pub fn forward_blocks(
        &self,
        tape: &mut Tape,
        p: &Bound,
        mut h: SubspaceTensor,
        cond: &CondVars,
    ) -> Result<SubspaceTensor> {
        let shared = self.sola.shared(tape, p, cond)?;
        for (i, blk) in self.blocks.iter().enumerate() {
            let m = self.sola.modulation(tape, p, &shared, i)?;
            h = blk.forward(tape, p, h, &m)?;
        }
        Ok(h)
    }

    /// Forward pass with frozen parameters on a fresh tape.
    pub fn velocity(
        &self,
        store: &ParamStore,
        precision: Precision,
        x_t: &Tensor,
        visual: &Tensor,
        cond: &Conditioning,
    ) -> Result<Tensor> {
        let mut tape = Tape::new(precision);
        let p = store.bind_frozen(&mut tape)?;
        let x = tape.constant(x_t.clone())?;
        let v = tape.constant(visual.clone())?;
        let c = CondVars::constant(&mut tape, cond)?;
        let out = self.forward(&mut tape, &p, x, v, &c)?;
        Ok(tape.value(out).clone())
    }

    /// Zero every gate output of the shared conditioner and of the low-rank
    /// adjustments, making each DiCB an identity map.
    pub fn zero_gates(&self, store: &mut ParamStore) {
        self.sola.zero_gates(store);
    }

    /// Scalars in the DiCB stack (blocks plus the shared conditioner).
    pub fn dicb_param_count(store: &ParamStore) -> usize {
        store
            .iter()
            .filter(|(n, _)| n.starts_with("backbone.block.") || n.starts_with("backbone.sola."))
            .map(|(_, t)| t.len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::gradcheck;

    fn build(cfg: &BackboneConfig, seed: u64) -> (Backbone, ParamStore) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, "init");
        let net = Backbone::new(cfg, &mut store, &mut r).unwrap();
        (net, store)
    }

    fn inputs(cfg: &BackboneConfig, t_v: usize, seed: u64) -> (Tensor, Tensor, Conditioning) {
        let mut r = rng::stream(seed, "data");
        let x = Tensor::randn(&[t_v * cfg.upsample_factor, cfg.latent_dim], 1.0, &mut r);
        let v = Tensor::randn(&[t_v, cfg.visual_dim], 1.0, &mut r);
        let s = Tensor::randn(&[cfg.speaker_dim], 1.0, &mut r);
        (x, v, Conditioning::new(0.37, s).unwrap())
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut c = BackboneConfig::desk();
        c.kernel_sub = 6;
        assert!(c.validate().unwrap_err().to_string().contains("kernel_sub"));
        let mut c = BackboneConfig::desk();
        c.subspaces = 5;
        assert!(c.validate().unwrap_err().to_string().contains("divisible"));
        BackboneConfig::paper().validate().unwrap();
        BackboneConfig::tiny().validate().unwrap();
    }

    #[test]
    fn output_shape_desk() {
        let cfg = BackboneConfig {
            subspaces: 2,
            blocks: 2,
            latent_dim: 4,
            ..BackboneConfig::desk()
        };
        let (net, store) = build(&cfg, 0);
        let (x, v, c) = inputs(&cfg, 3, 1);
        let out = net.velocity(&store, Precision::F64, &x, &v, &c).unwrap();
        assert_eq!(out.shape(), &[6, 4]);
    }

    #[test]
    fn mismatched_lengths_are_a_contract_error() {
        let cfg = BackboneConfig::tiny();
        let (net, store) = build(&cfg, 0);
        let (x, _, c) = inputs(&cfg, 3, 1);
        let v = Tensor::zeros(&[4, cfg.visual_dim]);
        let err = net.velocity(&store, Precision::F64, &x, &v, &c).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn zero_velocity_at_init() {
        let cfg = BackboneConfig::tiny();
        let (net, store) = build(&cfg, 3);
        let (x, v, c) = inputs(&cfg, 5, 4);
        let out = net.velocity(&store, Precision::F64, &x, &v, &c).unwrap();
        assert!(out.data().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn zero_gates_make_stack_identity() {
        let cfg = BackboneConfig::tiny();
        let (net, mut store) = build(&cfg, 5);
        store.jitter(0.3, &mut rng::stream(9, "jitter"));
        net.zero_gates(&mut store);
        let mut r = rng::stream(1, "x");
        let h0 = Tensor::randn(&[cfg.subspaces, cfg.sub_channels, 9], 1.0, &mut r);
        let mut tape = Tape::new(Precision::F64);
        let p = store.bind_frozen(&mut tape).unwrap();
        let h = tape.constant(h0.clone()).unwrap();
        let c = Conditioning::new(0.6, Tensor::randn(&[cfg.speaker_dim], 1.0, &mut r)).unwrap();
        let cv = CondVars::constant(&mut tape, &c).unwrap();
        let out = net.forward_blocks(&mut tape, &p, SubspaceTensor::wrap(h), &cv).unwrap();
        assert_eq!(tape.value(out.var()), &h0);
    }

    #[test]
    fn rank_zero_modulation_is_block_independent() {
        let cfg = BackboneConfig {
            adaln_rank: 0,
            ..BackboneConfig::tiny()
        };
        let (net, mut store) = build(&cfg, 2);
        store.jitter(0.3, &mut rng::stream(2, "jitter"));
        let mut tape = Tape::new(Precision::F64);
        let p = store.bind_frozen(&mut tape).unwrap();
        let c = Conditioning::new(0.2, Tensor::ones(&[cfg.speaker_dim])).unwrap();
        let cv = CondVars::constant(&mut tape, &c).unwrap();
        let shared = net.sola.shared(&mut tape, &p, &cv).unwrap();
        let m0 = net.sola.modulation(&mut tape, &p, &shared, 0).unwrap();
        let m1 = net.sola.modulation(&mut tape, &p, &shared, 1).unwrap();
        for (a, b) in [(m0.attn_gate, m1.attn_gate), (m0.ffn_scale, m1.ffn_scale)] {
            assert_eq!(tape.value(a), tape.value(b));
        }
    }

    #[test]
    fn lowrank_modulation_differs_per_block_after_training_moves_it() {
        let cfg = BackboneConfig::tiny();
        let (net, mut store) = build(&cfg, 2);
        let mut tape = Tape::new(Precision::F64);
        let p = store.bind_frozen(&mut tape).unwrap();
        let c = Conditioning::new(0.2, Tensor::ones(&[cfg.speaker_dim])).unwrap();
        let cv = CondVars::constant(&mut tape, &c).unwrap();
        let shared = net.sola.shared(&mut tape, &p, &cv).unwrap();
        let m0 = net.sola.modulation(&mut tape, &p, &shared, 0).unwrap();
        let m1 = net.sola.modulation(&mut tape, &p, &shared, 1).unwrap();
        // zero-initialized up projections: identical at init
        assert_eq!(tape.value(m0.attn_scale), tape.value(m1.attn_scale));

        store.jitter(0.3, &mut rng::stream(2, "jitter"));
        let mut tape = Tape::new(Precision::F64);
        let p = store.bind_frozen(&mut tape).unwrap();
        let cv = CondVars::constant(&mut tape, &c).unwrap();
        let shared = net.sola.shared(&mut tape, &p, &cv).unwrap();
        let m0 = net.sola.modulation(&mut tape, &p, &shared, 0).unwrap();
        let m1 = net.sola.modulation(&mut tape, &p, &shared, 1).unwrap();
        assert_ne!(tape.value(m0.attn_scale), tape.value(m1.attn_scale));
    }

    #[test]
    fn decompose_streams_are_local_to_their_channel_group() {
        let cfg = BackboneConfig {
            subspaces: 2,
            visual_dim: 6,
            latent_dim: 2,
            upsample_factor: 1,
            ..BackboneConfig::tiny()
        };
        let (net, mut store) = build(&cfg, 8);
        store.jitter(0.2, &mut rng::stream(8, "jitter"));
        let run = |x: &Tensor, v: &Tensor| {
            let mut tape = Tape::new(Precision::F64);
            let p = store.bind_frozen(&mut tape).unwrap();
            let xv = tape.constant(x.clone()).unwrap();
            let vv = tape.constant(v.transpose2().unwrap()).unwrap();
            let h = net.decompose.streams(&mut tape, &p, xv, vv).unwrap();
            tape.value(h).clone()
        };
        let mut r = rng::stream(0, "x");
        let x = Tensor::randn(&[4, 2], 1.0, &mut r);
        let v = Tensor::randn(&[4, 6], 1.0, &mut r);
        let base = run(&x, &v);
        assert_eq!(base.shape(), &[2, cfg.sub_channels, 4]);
        let half = cfg.sub_channels * 4;
        // joint channels: [x0, x1, v0, v1 | v2, v3, v4, v5]; group size 4
        for ch in 0..8 {
            let (mut x2, mut v2) = (x.clone(), v.clone());
            if ch < 2 {
                x2.data_mut()[2 + ch] += 0.5;
            } else {
                v2.data_mut()[6 + ch - 2] += 0.5;
            }
            let out = run(&x2, &v2);
            let changed0 = out.data()[..half] != base.data()[..half];
            let changed1 = out.data()[half..] != base.data()[half..];
            assert_eq!((changed0, changed1), (ch < 4, ch >= 4), "channel {ch}");
        }
    }

    #[test]
    fn decompose_of_zero_input_is_zero_before_modulation() {
        let cfg = BackboneConfig::tiny();
        let (net, store) = build(&cfg, 1);
        let mut tape = Tape::new(Precision::F64);
        let p = store.bind_frozen(&mut tape).unwrap();
        let x = tape.constant(Tensor::zeros(&[5, cfg.latent_dim])).unwrap();
        let v = tape.constant(Tensor::zeros(&[cfg.visual_dim, 5])).unwrap();
        let h = net.decompose.streams(&mut tape, &p, x, v).unwrap();
        assert!(tape.value(h).data().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn upsampler_at_init_repeats_frames() {
        for f in [1, 2, 4] {
            let cfg = BackboneConfig {
                upsample_factor: f,
                ..BackboneConfig::tiny()
            };
            let (net, store) = build(&cfg, 0);
            let mut r = rng::stream(0, "v");
            let v = Tensor::randn(&[5, cfg.visual_dim], 1.0, &mut r);
            let mut tape = Tape::new(Precision::F64);
            let p = store.bind_frozen(&mut tape).unwrap();
            let vv = tape.constant(v.clone()).unwrap();
            let up = net.upsample.forward(&mut tape, &p, vv).unwrap();
            let got = tape.value(up).transpose2().unwrap();
            assert_eq!(got.shape(), &[5 * f, cfg.visual_dim]);
            assert_eq!(got, subspace::repeat_frames(&v, f).unwrap());
        }
    }

    #[test]
    fn full_model_gradcheck() {
        let cfg = BackboneConfig::tiny();
        let (net, mut store) = build(&cfg, 11);
        store.jitter(0.2, &mut rng::stream(11, "jitter"));
        let (x, v, c) = inputs(&cfg, 3, 12);
        let mut r = rng::stream(3, "target");
        let target = Tensor::randn(x.shape(), 1.0, &mut r);
        let mut named: Vec<(String, Tensor)> = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        named.push(("x_t".into(), x));
        named.push(("visual".into(), v));
        let report = gradcheck::check(
            &named,
            |tape, vars| {
                let n = vars.len();
                let p = Bound::from_vars(vars[..n - 2].to_vec());
                let cv = CondVars::constant(tape, &c)?;
                let out = net.forward(tape, &p, vars[n - 2], vars[n - 1], &cv)?;
                let tv = tape.constant(target.clone())?;
                tape.mse(out, tv)
            },
            1e-5,
            Some(24),
        )
        .unwrap();
        let worst = report.worst().unwrap();
        assert!(report.max_rel_err() < 1e-4, "{worst:?}");
    }
}
