//! Training loop, checkpoints and sampling from a trained model.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread::JoinHandle;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::archive::Archive;
use crate::backbone::{Backbone, BackboneConfig, CondVars, Conditioning};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::flow::{self, FlowState, SamplerConfig};
use crate::nn::ParamStore;
use crate::objectives::{self, Auxiliaries, LossBreakdown, PretrainReport};
use crate::optim::{self, AdamW};
use crate::rng::{self, StreamPos, StreamRng};
use crate::tensor::{Precision, Tape, Tensor};
use crate::world::{self, EvalMetrics, Sample, World};

pub const METRICS_HEADER: &str = "step,lr,loss_total,loss_fm,loss_slm,loss_sem";
const PRETRAIN_LATENTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    /// Number of completed optimizer steps.
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.lr, self.loss.total, self.loss.fm, self.loss.slm, self.loss.sem
        )
    }
}

/// One training example after all randomness has been drawn.
#[derive(Debug, Clone)]
struct Item {
    visual: Tensor,
    speaker: Tensor,
    state: FlowState,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub world: World,
    pub backbone: Backbone,
    pub store: ParamStore,
    pub aux: Auxiliaries,
    pub opt: AdamW,
    pub step: u64,
    pub pretrain: Option<PretrainReport>,
    data_rng: StreamRng,
    noise_rng: StreamRng,
    time_rng: StreamRng,
    pending_write: Option<JoinHandle<Result<()>>>,
    corpus: Option<Vec<Sample>>,
}

impl Trainer {
    /// Fresh model with the semantic autoencoder pretrained on world latents.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let mut t = Self::untrained(cfg)?;
        let mut r = rng::stream(cfg.train.seed, "pretrain");
        let latents = (0..PRETRAIN_LATENTS)
            .map(|_| {
                let t_v = t.world.draw_t_v(&mut r);
                Ok(t.world.draw_sample(&mut r, t_v)?.target)
            })
            .collect::<Result<Vec<_>>>()?;
        let target = t.world.semantic_target(cfg.aux.semantic_dim);
        let report = objectives::pretrain_semantic(
            &mut t.aux.semantic,
            &latents,
            &target,
            cfg.aux.pretrain_steps,
            cfg.aux.pretrain_lr,
        )?;
        t.pretrain = Some(report);
        Ok(t)
    }

    /// All modules at initialization, semantic autoencoder untrained.
    pub fn untrained(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.train.seed;
        let world = World::new(&cfg.world_config())?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&cfg.backbone, &mut store, &mut rng::stream(seed, "init"))?;
        let aux = Auxiliaries::new(cfg.backbone.latent_dim, &cfg.aux, seed)?;
        let opt = AdamW::new(cfg.train.optimizer, store.tensors());
        let corpus = cfg
            .train
            .dataset
            .as_ref()
            .map(|p| load_corpus(Path::new(p), &cfg.backbone))
            .transpose()?;
        Ok(Self {
            cfg: cfg.clone(),
            world,
            backbone,
            store,
            aux,
            opt,
            step: 0,
            pretrain: None,
            data_rng: rng::stream(seed, "data"),
            noise_rng: rng::stream(seed, "noise"),
            time_rng: rng::stream(seed, "time"),
            pending_write: None,
            corpus,
        })
    }

    fn draw_batch(&mut self) -> Result<Vec<Item>> {
        (0..self.cfg.train.batch_size)
            .map(|_| {
                let s = match &self.corpus {
                    Some(c) => c[self.data_rng.random_range(0..c.len())].clone(),
                    None => {
                        let t_v = self.world.draw_t_v(&mut self.data_rng);
                        self.world.draw_sample(&mut self.data_rng, t_v)?
                    }
                };
                let x0 = Tensor::randn(s.target.shape(), 1.0, &mut self.noise_rng);
                let t = flow::sample_t(&mut self.time_rng);
                Ok(Item {
                    state: flow::sample_path(&x0, &s.target, t)?,
                    visual: s.visual,
                    speaker: s.speaker,
                })
            })
            .collect()
    }

    fn sample_grads(&self, item: &Item) -> Result<(LossBreakdown, Vec<Tensor>)> {
        let mut tape = Tape::new(self.cfg.precision);
        let p = self.store.bind(&mut tape)?;
        let x_t = tape.constant(item.state.x_t.clone())?;
        let visual = tape.constant(item.visual.clone())?;
        let cond = CondVars::constant(&mut tape, &Conditioning::new(item.state.t, item.speaker.clone())?)?;
        let v = self.backbone.forward(&mut tape, &p, x_t, visual, &cond)?;
        let (loss, br) = objectives::total_loss(
            &mut tape,
            v,
            &item.state,
            self.cfg.weights,
            self.cfg.train.fm_form,
            &self.aux,
        )?;
        Ok((br, tape.grad(loss, p.vars())?))
    }

    pub fn lr(&self) -> f64 {
        let t = &self.cfg.train;
        optim::cosine_lr(self.step, t.total_steps, t.base_lr, t.min_lr, t.warmup_steps)
    }

    pub fn train_step(&mut self) -> Result<StepLog> {
        let lr = self.lr();
        let items = self.draw_batch()?;
        let per_item = items
            .par_iter()
            .map(|it| self.sample_grads(it))
            .collect::<Result<Vec<_>>>()?;
        let n = per_item.len() as f64;
        let mut grads: Vec<Tensor> = self.store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut loss = LossBreakdown::default();
        for (br, g) in &per_item {
            loss.total += br.total / n;
            loss.fm += br.fm / n;
            loss.slm += br.slm / n;
            loss.sem += br.sem / n;
            for (acc, gi) in grads.iter_mut().zip(g) {
                for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                    *a += b / n;
                }
            }
        }
        if !loss.total.is_finite() {
            return Err(Error::TrainingDiverged {
                step: self.step as usize,
                reason: format!("loss is {}", loss.total),
            });
        }
        let grad_norm = optim::clip_grad_norm(&mut grads, self.cfg.train.grad_clip);
        let names = self.store.names().to_vec();
        self.opt.step(self.store.tensors_mut(), &grads, &names, lr)?;
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            lr,
            loss,
            grad_norm,
        })
    }

    /// Train until `total_steps`. With `out`, appends to `metrics.csv`,
    /// writes `checkpoint.bin` periodically and at the end, and evaluations
    /// to `eval_log.jsonl`. A failed step leaves the last checkpoint intact.
    pub fn run(&mut self, out: Option<&Path>, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut csv = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let path = dir.join("metrics.csv");
                let fresh = self.step == 0 || !path.exists();
                let mut f = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(!fresh)
                    .truncate(fresh)
                    .open(&path)?;
                if fresh {
                    writeln!(f, "{METRICS_HEADER}")?;
                }
                Some(f)
            }
            None => None,
        };
        let mut logs = Vec::new();
        let (ckpt_every, eval_every) = (self.cfg.train.checkpoint_every, self.cfg.train.eval_every);
        while self.step < self.cfg.train.total_steps {
            let log = self.train_step()?;
            if let Some(f) = csv.as_mut() {
                writeln!(f, "{}", log.csv_row())?;
            }
            on_step(&log);
            logs.push(log);
            if let Some(dir) = out {
                if ckpt_every > 0 && self.step % ckpt_every == 0 && self.step < self.cfg.train.total_steps {
                    self.save_checkpoint_async(&dir.join("checkpoint.bin"))?;
                }
                if eval_every > 0 && self.step % eval_every == 0 {
                    let m = self.evaluate()?;
                    let mut f = OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(dir.join("eval_log.jsonl"))?;
                    writeln!(f, "{}", json!({"step": self.step, "metrics": m}))?;
                }
            }
        }
        if let Some(dir) = out {
            self.save_checkpoint_async(&dir.join("checkpoint.bin"))?;
            self.flush_writes()?;
        }
        Ok(logs)
    }

    fn save_checkpoint_async(&mut self, path: &Path) -> Result<()> {
        self.flush_writes()?;
        let snapshot = self.checkpoint();
        let path: PathBuf = path.to_path_buf();
        self.pending_write = Some(std::thread::spawn(move || snapshot.save(&path)));
        Ok(())
    }

    /// Wait for any background checkpoint write.
    pub fn flush_writes(&mut self) -> Result<()> {
        if let Some(h) = self.pending_write.take() {
            h.join()
                .map_err(|_| Error::Archive("checkpoint writer panicked".into()))??;
        }
        Ok(())
    }

    pub fn evaluate(&self) -> Result<EvalMetrics> {
        let nfe = self.cfg.sampler;
        world::eval_generation(&self.world, &self.cfg.eval, |v, s, x0| {
            generate(&self.backbone, &self.store, self.cfg.precision, v, s, x0, nfe)
        })
    }

    /// Snapshot of everything needed to resume bit-exactly.
    pub fn checkpoint(&self) -> Archive {
        let meta = json!({
            "kind": "checkpoint",
            "config": self.cfg,
            "step": self.step,
            "opt_step": self.opt.step,
            "rng": {
                "data": rng::position(&self.data_rng),
                "noise": rng::position(&self.noise_rng),
                "time": rng::position(&self.time_rng),
            },
            "pretrain": self.pretrain,
        });
        let mut a = Archive::new(meta);
        for (n, t) in self.store.iter() {
            a.push(format!("model.{n}"), t.clone());
        }
        for (n, t) in self.aux.stub_store.iter().chain(self.aux.semantic.store.iter()) {
            a.push(format!("aux.{n}"), t.clone());
        }
        for (i, n) in self.store.names().iter().enumerate() {
            a.push(format!("opt.m.{n}"), self.opt.m[i].clone());
            a.push(format!("opt.v.{n}"), self.opt.v[i].clone());
        }
        a
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn from_checkpoint(a: &Archive) -> Result<Self> {
        let cfg = checkpoint_config(a)?;
        let mut t = Self::untrained(&cfg)?;
        load_store(a, "model.", &mut t.store)?;
        load_store(a, "aux.", &mut t.aux.stub_store)?;
        load_store(a, "aux.", &mut t.aux.semantic.store)?;
        for (i, n) in t.store.names().to_vec().iter().enumerate() {
            t.opt.m[i] = checked(a, &format!("opt.m.{n}"), t.store.tensors()[i].shape())?;
            t.opt.v[i] = checked(a, &format!("opt.v.{n}"), t.store.tensors()[i].shape())?;
        }
        let meta = &a.meta;
        let field = |k: &str| -> Result<&Value> {
            meta.get(k)
                .ok_or_else(|| Error::Archive(format!("checkpoint manifest lacks `{k}`")))
        };
        t.step = serde_json::from_value(field("step")?.clone())?;
        t.opt.step = serde_json::from_value(field("opt_step")?.clone())?;
        t.pretrain = serde_json::from_value(field("pretrain")?.clone())?;
        let rngs = field("rng")?;
        let pos = |k: &str| -> Result<StreamPos> {
            Ok(serde_json::from_value(
                rngs.get(k)
                    .ok_or_else(|| Error::Archive(format!("checkpoint lacks rng position `{k}`")))?
                    .clone(),
            )?)
        };
        let seed = cfg.train.seed;
        t.data_rng = rng::restore(seed, "data", pos("data")?);
        t.noise_rng = rng::restore(seed, "noise", pos("noise")?);
        t.time_rng = rng::restore(seed, "time", pos("time")?);
        Ok(t)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Archive::load(path)?)
    }
}

/// Samples of a dataset archive (`visual.{i}`, `speaker.{i}`, `target.{i}`),
/// checked against the backbone dimensions.
pub fn load_corpus(path: &Path, b: &BackboneConfig) -> Result<Vec<Sample>> {
    let a = Archive::load(path)?;
    let mut out = Vec::new();
    while let Some(visual) = a.get(&format!("visual.{}", out.len())) {
        let i = out.len();
        let speaker = a.require(&format!("speaker.{i}"))?;
        let target = a.require(&format!("target.{i}"))?;
        let t_v = visual.shape()[0];
        let ok = visual.shape() == [t_v, b.visual_dim]
            && speaker.shape() == [b.speaker_dim]
            && target.shape() == [t_v * b.upsample_factor, b.latent_dim];
        if !ok {
            return Err(Error::Config(format!(
                "train.dataset sample {i} has shapes {:?}/{:?}/{:?}, which do not fit the backbone",
                visual.shape(),
                speaker.shape(),
                target.shape()
            )));
        }
        out.push(Sample {
            visual: visual.clone(),
            speaker: speaker.clone(),
            target: target.clone(),
        });
    }
    if out.is_empty() {
        return Err(Error::Config(format!("train.dataset {} holds no samples", path.display())));
    }
    Ok(out)
}

pub fn checkpoint_config(a: &Archive) -> Result<RunConfig> {
    if a.meta.get("kind").and_then(Value::as_str) != Some("checkpoint") {
        return Err(Error::Archive("archive is not a checkpoint".into()));
    }
    let cfg = a
        .meta
        .get("config")
        .ok_or_else(|| Error::Archive("checkpoint manifest lacks `config`".into()))?;
    let cfg: RunConfig = serde_json::from_value(cfg.clone())?;
    cfg.validate()?;
    Ok(cfg)
}

fn checked(a: &Archive, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = a.require(name)?;
    if t.shape() != shape {
        return Err(Error::CheckpointTensor {
            name: name.to_string(),
            reason: format!("shape {:?} does not match expected {:?}", t.shape(), shape),
        });
    }
    Ok(t.clone())
}

/// Fill every tensor of `store` from `prefix + name`. All tensors are
/// validated before any is written.
fn load_store(a: &Archive, prefix: &str, store: &mut ParamStore) -> Result<()> {
    let loaded = store
        .iter()
        .map(|(n, t)| checked(a, &format!("{prefix}{n}"), t.shape()).map(|v| (n.to_string(), v)))
        .collect::<Result<Vec<_>>>()?;
    for (n, t) in loaded {
        store.set(&n, t)?;
    }
    Ok(())
}

/// Backbone and parameters from a checkpoint, for sampling and evaluation.
pub fn load_model(a: &Archive) -> Result<(RunConfig, Backbone, ParamStore, u64)> {
    let cfg = checkpoint_config(a)?;
    let mut store = ParamStore::new();
    let backbone = Backbone::new(&cfg.backbone, &mut store, &mut rng::stream(cfg.train.seed, "init"))?;
    load_store(a, "model.", &mut store)?;
    let step = a.meta.get("step").and_then(Value::as_u64).unwrap_or(0);
    Ok((cfg, backbone, store, step))
}

/// Euler-integrate the backbone velocity from `x0` for one condition.
pub fn generate(
    backbone: &Backbone,
    store: &ParamStore,
    precision: Precision,
    visual: &Tensor,
    speaker: &Tensor,
    x0: &Tensor,
    sampler: SamplerConfig,
) -> Result<Tensor> {
    flow::euler_sample(
        |x, t| {
            let cond = Conditioning::new(t, speaker.clone())?;
            backbone.velocity(store, precision, x, visual, &cond)
        },
        x0,
        sampler,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig {
            backbone: BackboneConfig::tiny(),
            ..Default::default()
        };
        cfg.train.total_steps = 4;
        cfg.train.batch_size = 2;
        cfg.aux.pretrain_steps = 2;
        cfg.world.t_v_min = 3;
        cfg.world.t_v_max = 5;
        cfg
    }

    #[test]
    fn zero_lr_step_leaves_parameters_unchanged() {
        let mut cfg = tiny_cfg();
        cfg.train.base_lr = 0.0;
        let mut t = Trainer::untrained(&cfg).unwrap();
        let before = t.store.clone();
        t.train_step().unwrap();
        assert_eq!(t.store, before);
    }

    #[test]
    fn stubs_and_semantic_decoder_stay_frozen() {
        let cfg = tiny_cfg();
        let mut t = Trainer::new(&cfg).unwrap();
        let (stubs, sem) = (t.aux.stub_store.clone(), t.aux.semantic.store.clone());
        let before = t.store.clone();
        t.run(None, |_| {}).unwrap();
        assert_eq!(t.aux.stub_store, stubs);
        assert_eq!(t.aux.semantic.store, sem);
        assert_ne!(t.store, before);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let cfg = tiny_cfg();
        let mut t = Trainer::new(&cfg).unwrap();
        t.train_step().unwrap();
        let bytes = t.checkpoint().to_bytes().unwrap();
        let back = Trainer::from_checkpoint(&Archive::from_bytes(&bytes).unwrap()).unwrap();
        assert!(back.checkpoint().to_bytes().unwrap() == bytes);
    }

    #[test]
    fn load_names_the_bad_tensor() {
        let cfg = tiny_cfg();
        let t = Trainer::untrained(&cfg).unwrap();
        let mut a = t.checkpoint();
        let name = "model.backbone.recompose.out.bias".to_string();
        let slot = a.tensors.iter_mut().find(|(n, _)| *n == name).unwrap();
        slot.1 = Tensor::zeros(&[3]);
        let err = Trainer::from_checkpoint(&a).err().unwrap().to_string();
        assert!(err.contains(&name), "{err}");
    }
}
