//! Auxiliary losses on the data prediction `d`, the semantic autoencoder and
//! the combined training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{self, FlowState};
use crate::nn::{Bound, Builder, Conv1d, ConvTranspose1d, ParamStore};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{self, StreamRng};
use crate::tensor::{Activation, Precision, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 100.0,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, l) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !l.is_finite() || l < 0.0 {
                return Err(Error::Config(format!("weights.{name} must be finite and >= 0, got {l}")));
            }
        }
        Ok(())
    }
}

/// How the flow-matching term is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FmForm {
    /// Weighted data-prediction loss with auxiliary terms on `d`.
    #[default]
    Reparameterized,
    /// Plain velocity regression; no data prediction, so no auxiliary terms.
    Velocity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuxConfig {
    pub wave_hidden: usize,
    pub slm_hidden: usize,
    pub slm_dim: usize,
    pub semantic_dim: usize,
    pub semantic_hidden: usize,
    pub semantic_kernel: usize,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub activation: Activation,
}

impl Default for AuxConfig {
    fn default() -> Self {
        Self {
            wave_hidden: 8,
            slm_hidden: 8,
            slm_dim: 8,
            semantic_dim: 8,
            semantic_hidden: 16,
            semantic_kernel: 3,
            pretrain_steps: 300,
            pretrain_lr: 1e-2,
            activation: Activation::Gelu,
        }
    }
}

impl AuxConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("wave_hidden", self.wave_hidden),
            ("slm_hidden", self.slm_hidden),
            ("slm_dim", self.slm_dim),
            ("semantic_dim", self.semantic_dim),
            ("semantic_hidden", self.semantic_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("aux.{name} must be at least 1")));
            }
        }
        if self.semantic_kernel % 2 == 0 {
            return Err(Error::Config("aux.semantic_kernel must be odd".into()));
        }
        if !(self.pretrain_lr >= 0.0) {
            return Err(Error::Config("aux.pretrain_lr must be >= 0".into()));
        }
        Ok(())
    }
}

/// Frozen random "codec decoder": two stride-2 transposed convolutions
/// mapping `[T, D_a]` latents to a `[1, 4T]` waveform.
#[derive(Debug, Clone)]
pub struct WaveDecoderStub {
    up1: ConvTranspose1d,
    up2: ConvTranspose1d,
    act: Activation,
}

/// Frozen random "speech model": two stride-2 convolutions from a waveform
/// to `[slm_dim, T]` features.
#[derive(Debug, Clone)]
pub struct SlmStub {
    down1: Conv1d,
    down2: Conv1d,
    act: Activation,
}

impl WaveDecoderStub {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, latent: Var) -> Result<Var> {
        let x = tape.transpose(latent)?;
        let h = self.up1.forward(tape, p, x)?;
        let h = tape.activation(h, self.act)?;
        self.up2.forward(tape, p, h)
    }
}

impl SlmStub {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, wave: Var) -> Result<Var> {
        let h = self.down1.forward(tape, p, wave)?;
        let h = tape.activation(h, self.act)?;
        self.down2.forward(tape, p, h)
    }
}

/// Three-layer conv stack; `act = None` makes it affine.
#[derive(Debug, Clone)]
pub struct ConvStack {
    layers: Vec<Conv1d>,
    act: Option<Activation>,
}

impl ConvStack {
    fn new(bld: &mut Builder<'_>, dims: [usize; 4], k: usize, act: Option<Activation>) -> Self {
        let layers = (0..3)
            .map(|i| Conv1d::same(bld, &format!("conv.{i}"), dims[i], dims[i + 1], k))
            .collect();
        Self { layers, act }
    }

    /// `[T, D_in]` to `[T, D_out]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = tape.transpose(x)?;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, p, h)?;
            if i + 1 < self.layers.len() {
                if let Some(a) = self.act {
                    h = tape.activation(h, a)?;
                }
            }
        }
        tape.transpose(h)
    }
}

/// Encoder from semantic features to latent-shaped codes and the decoder
/// `D_s` from latents back to semantic features.
#[derive(Debug, Clone)]
pub struct SemanticAutoencoder {
    pub store: ParamStore,
    pub encoder: ConvStack,
    pub decoder: ConvStack,
}

impl SemanticAutoencoder {
    pub fn new(latent_dim: usize, cfg: &AuxConfig, act: Option<Activation>, rng: &mut StreamRng) -> Self {
        let mut store = ParamStore::new();
        let (h, f) = (cfg.semantic_hidden, cfg.semantic_dim);
        let mut bld = Builder::new(&mut store, rng);
        let encoder = bld.scope("semantic.encoder", |b| {
            ConvStack::new(b, [f, h, h, latent_dim], cfg.semantic_kernel, act)
        });
        let decoder = bld.scope("semantic.decoder", |b| {
            ConvStack::new(b, [latent_dim, h, h, f], cfg.semantic_kernel, act)
        });
        Self { store, encoder, decoder }
    }

    /// `D_s(latent)` with frozen parameters.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(Precision::F64);
        let p = self.store.bind_frozen(&mut tape)?;
        let x = tape.constant(latent.clone())?;
        let y = self.decoder.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }

    fn recon_loss(&self, tape: &mut Tape, p: &Bound, latent: &Tensor, target: &Tensor) -> Result<Var> {
        let s = tape.constant(target.clone())?;
        let x = tape.constant(latent.clone())?;
        let code = self.encoder.forward(tape, p, s)?;
        let back = self.decoder.forward(tape, p, code)?;
        let dec = self.decoder.forward(tape, p, x)?;
        let a = tape.mse(back, s)?;
        let b = tape.mse(dec, s)?;
        tape.add(a, b)
    }
}

/// Fixed map from clean latents to synthetic semantic features:
/// `tanh(x W + b)`, or `x W + b` when `squash` is false.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTarget {
    pub weight: Tensor,
    pub bias: Tensor,
    pub squash: bool,
}

impl SemanticTarget {
    pub fn random(latent_dim: usize, dim: usize, squash: bool, rng: &mut StreamRng) -> Self {
        Self {
            weight: Tensor::randn(&[latent_dim, dim], 1.0 / (latent_dim as f64).sqrt(), rng),
            bias: Tensor::randn(&[dim], 0.1, rng),
            squash,
        }
    }

    /// `[T, D_a]` to `[T, dim]`.
    pub fn apply(&self, latent: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.constant(latent.clone())?;
        let w = tape.constant(self.weight.clone())?;
        let b = tape.constant(self.bias.clone())?;
        let y = tape.linear(x, w, Some(b))?;
        let y = tape.value(y).clone();
        Ok(if self.squash { y.map(f64::tanh) } else { y })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
}

/// Train encoder and decoder together on full batches of `latents`:
/// `mse(D_s(E(s)), s) + mse(D_s(x1), s)` with `s = target(x1)`.
pub fn pretrain_semantic(
    ae: &mut SemanticAutoencoder,
    latents: &[Tensor],
    target: &SemanticTarget,
    steps: usize,
    lr: f64,
) -> Result<PretrainReport> {
    let targets = latents.iter().map(|x| target.apply(x)).collect::<Result<Vec<_>>>()?;
    let cfg = AdamWConfig {
        beta1: 0.9,
        beta2: 0.999,
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut opt = AdamW::new(cfg, ae.store.tensors());
    let names = ae.store.names().to_vec();
    let n = latents.len().max(1) as f64;

    let eval = |ae: &SemanticAutoencoder, with_grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut total = 0.0;
        let mut grads: Vec<Tensor> = ae.store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for (x, s) in latents.iter().zip(&targets) {
            let mut tape = Tape::new(Precision::F64);
            let p = if with_grad {
                ae.store.bind(&mut tape)?
            } else {
                ae.store.bind_frozen(&mut tape)?
            };
            let l = ae.recon_loss(&mut tape, &p, x, s)?;
            total += tape.value(l).item();
            if with_grad {
                for (g, gi) in grads.iter_mut().zip(tape.grad(l, p.vars())?) {
                    *g = g.add(&gi.scale(1.0 / n))?;
                }
            }
        }
        Ok((total / n, grads))
    };

    let (initial_loss, _) = eval(ae, false)?;
    for step in 0..steps {
        let (loss, grads) = eval(ae, true)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                step,
                reason: "semantic pretraining loss is not finite".into(),
            });
        }
        opt.step(ae.store.tensors_mut(), &grads, &names, lr)?;
    }
    let (final_loss, _) = eval(ae, false)?;
    if !final_loss.is_finite() {
        return Err(Error::TrainingDiverged {
            step: steps,
            reason: "semantic pretraining loss is not finite".into(),
        });
    }
    Ok(PretrainReport {
        initial_loss,
        final_loss,
        steps,
    })
}

/// All frozen modules used by the auxiliary losses.
#[derive(Debug, Clone)]
pub struct Auxiliaries {
    pub stub_store: ParamStore,
    pub wave: WaveDecoderStub,
    pub slm: SlmStub,
    pub semantic: SemanticAutoencoder,
}

impl Auxiliaries {
    /// Random stubs and an untrained semantic autoencoder, all from `seed`.
    pub fn new(latent_dim: usize, cfg: &AuxConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, "stubs");
        let mut stub_store = ParamStore::new();
        let mut bld = Builder::new(&mut stub_store, &mut rng);
        let wave = bld.scope("stub.wave", |b| WaveDecoderStub {
            up1: ConvTranspose1d::new(b, "up1", latent_dim, cfg.wave_hidden, 4, 2),
            up2: ConvTranspose1d::new(b, "up2", cfg.wave_hidden, 1, 4, 2),
            act: cfg.activation,
        });
        let slm = bld.scope("stub.slm", |b| SlmStub {
            down1: Conv1d::new(b, "down1", 1, cfg.slm_hidden, 5, 2, 2, true),
            down2: Conv1d::new(b, "down2", cfg.slm_hidden, cfg.slm_dim, 5, 2, 2, true),
            act: cfg.activation,
        });
        let semantic = SemanticAutoencoder::new(latent_dim, cfg, Some(cfg.activation), &mut rng);
        Ok(Self {
            stub_store,
            wave,
            slm,
            semantic,
        })
    }

    fn slm_features(&self, tape: &mut Tape, p: &Bound, latent: Var) -> Result<Var> {
        let w = self.wave.forward(tape, p, latent)?;
        self.slm.forward(tape, p, w)
    }

    /// Per-pass handles for the frozen parameters.
    pub fn bind(&self, tape: &mut Tape) -> Result<AuxBound> {
        Ok(AuxBound {
            stubs: self.stub_store.bind_frozen(tape)?,
            semantic: self.semantic.store.bind_frozen(tape)?,
        })
    }

    /// Targets of both auxiliary terms for clean latents, computed off-tape so
    /// nothing flows back through them.
    pub fn targets(&self, x1: &Tensor, precision: Precision) -> Result<AuxTargets> {
        let mut tape = Tape::new(precision);
        let b = self.bind(&mut tape)?;
        let x = tape.constant(x1.clone())?;
        let f = self.slm_features(&mut tape, &b.stubs, x)?;
        let s = self.semantic.decoder.forward(&mut tape, &b.semantic, x)?;
        Ok(AuxTargets {
            slm: tape.value(f).clone(),
            semantic: tape.value(s).clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct AuxBound {
    stubs: Bound,
    semantic: Bound,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxTargets {
    pub slm: Tensor,
    pub semantic: Tensor,
}

/// `mean |SLM(D_a(d)) - SLM(D_a(x1))|^2`.
pub fn slm_loss(tape: &mut Tape, aux: &Auxiliaries, b: &AuxBound, d: Var, target: &AuxTargets) -> Result<Var> {
    let f = aux.slm_features(tape, &b.stubs, d)?;
    let t = tape.constant(target.slm.clone())?;
    tape.mse(f, t)
}

/// `mean |D_s(d) - D_s(x1)|^2`.
pub fn semantic_loss(
    tape: &mut Tape,
    aux: &Auxiliaries,
    b: &AuxBound,
    d: Var,
    target: &AuxTargets,
) -> Result<Var> {
    let s = aux.semantic.decoder.forward(tape, &b.semantic, d)?;
    let t = tape.constant(target.semantic.clone())?;
    tape.mse(s, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub fm: f64,
    pub slm: f64,
    pub sem: f64,
}

/// `L_FM + lambda1 L_SLM + lambda2 L_sem` for one sample, with the
/// auxiliary terms evaluated on `d = x_t + (1 - t) v`.
pub fn total_loss(
    tape: &mut Tape,
    v_pred: Var,
    state: &FlowState,
    weights: ObjectiveWeights,
    form: FmForm,
    aux: &Auxiliaries,
) -> Result<(Var, LossBreakdown)> {
    let fm = flow::fm_loss(tape, v_pred, state)?;
    let fm_val = tape.value(fm).item();
    if form == FmForm::Velocity {
        return Ok((
            fm,
            LossBreakdown {
                total: fm_val,
                fm: fm_val,
                slm: 0.0,
                sem: 0.0,
            },
        ));
    }
    let targets = aux.targets(&state.x1, tape.precision())?;
    let b = aux.bind(tape)?;
    let x_t = tape.constant(state.x_t.clone())?;
    let d = flow::d_from_v_var(tape, x_t, v_pred, state.t)?;
    let slm = slm_loss(tape, aux, &b, d, &targets)?;
    let sem = semantic_loss(tape, aux, &b, d, &targets)?;
    let ws = tape.scale(slm, weights.lambda1)?;
    let wm = tape.scale(sem, weights.lambda2)?;
    let total = tape.add(fm, ws)?;
    let total = tape.add(total, wm)?;
    let breakdown = LossBreakdown {
        total: tape.value(total).item(),
        fm: fm_val,
        slm: tape.value(slm).item(),
        sem: tape.value(sem).item(),
    };
    Ok((total, breakdown))
}
