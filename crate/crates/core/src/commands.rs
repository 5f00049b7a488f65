//! Implementations behind the `subflow` subcommands.
//!
//! Each command returns a JSON summary on success or a [`CmdError`] carrying
//! the process exit code: 2 for usage problems (bad config, missing or
//! mismatched inputs, unknown axis), 1 for failures during compute.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::archive::Archive;
use crate::backbone::{Backbone, CondVars, Conditioning};
use crate::config::{ConfigError, RunConfig};
use crate::error::Error;
use crate::flow::{self, SamplerConfig};
use crate::nn::{Bound, ParamStore};
use crate::objectives::{self, Auxiliaries, FmForm};
use crate::rng;
use crate::tensor::gradcheck::{self, GradcheckReport};
use crate::tensor::{Activation, Precision, Tape, Tensor, Var};
use crate::trainer::{self, Trainer};
use crate::world::{EvalMetrics, World, WorldConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CmdError {
    pub code: i32,
    pub message: String,
}

impl CmdError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl fmt::Display for CmdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CmdError {}

impl From<Error> for CmdError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Self::usage(e.to_string()),
            _ => Self::failure(e.to_string()),
        }
    }
}

impl From<ConfigError> for CmdError {
    fn from(e: ConfigError) -> Self {
        Self::usage(format!("invalid config: {e}"))
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        Self::failure(e.to_string())
    }
}

impl From<serde_json::Error> for CmdError {
    fn from(e: serde_json::Error) -> Self {
        Self::failure(e.to_string())
    }
}

pub type CmdResult<T> = std::result::Result<T, CmdError>;

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> CmdResult<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p, overrides)?,
        None => RunConfig::parse("", overrides)?,
    })
}

fn load_checkpoint(path: &Path) -> CmdResult<Archive> {
    if !path.is_file() {
        return Err(CmdError::usage(format!("checkpoint not found: {}", path.display())));
    }
    Archive::load(path).map_err(|e| CmdError::usage(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, v: &impl Serialize) -> CmdResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

/// Report written by `eval` and at the end of `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_step: u64,
    pub world_seed: u64,
    pub nfe: usize,
    pub metrics: EvalMetrics,
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub dry_run: bool,
    /// Continue from `out/checkpoint.bin` when it exists.
    pub resume: bool,
}

pub fn train(args: &TrainArgs, mut on_step: impl FnMut(&trainer::StepLog)) -> CmdResult<Value> {
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    if args.dry_run {
        let mut store = ParamStore::new();
        Backbone::new(&cfg.backbone, &mut store, &mut rng::stream(cfg.train.seed, "init"))?;
        return Ok(json!({
            "valid": true,
            "parameters": store.num_scalars(),
            "dicb_parameters": Backbone::dicb_param_count(&store),
            "tensors": store.len(),
        }));
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| CmdError::usage("no output directory: pass --out or set out_dir"))?;
    fs::create_dir_all(&out)?;
    let ckpt = out.join("checkpoint.bin");
    let mut t = if args.resume && ckpt.is_file() {
        let t = Trainer::load_checkpoint(&ckpt)?;
        if t.cfg != cfg {
            return Err(CmdError::usage("config differs from the checkpoint being resumed"));
        }
        t
    } else {
        Trainer::new(&cfg)?
    };
    write_json(&out.join("config.json"), &cfg)?;
    if let Some(p) = &t.pretrain {
        write_json(&out.join("pretrain.json"), p)?;
    }
    let start = Instant::now();
    let logs = t.run(Some(&out), |l| on_step(l))?;
    let train_secs = start.elapsed().as_secs_f64();
    let report = EvalReport {
        checkpoint_step: t.step,
        world_seed: cfg.world.seed,
        nfe: cfg.sampler.nfe,
        metrics: t.evaluate()?,
    };
    write_json(&out.join("eval.json"), &report)?;
    Ok(json!({
        "out_dir": out,
        "steps": t.step,
        "train_seconds": train_secs,
        "final_loss": logs.last().map(|l| l.loss),
        "eval": report,
    }))
}

// ---------------------------------------------------------------- sample

#[derive(Debug, Clone)]
pub struct SampleArgs {
    pub ckpt: PathBuf,
    pub nfe: usize,
    pub n: usize,
    pub condition_file: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
}

impl SampleArgs {
    pub fn new(ckpt: impl Into<PathBuf>) -> Self {
        Self {
            ckpt: ckpt.into(),
            nfe: SamplerConfig::default().nfe,
            n: 4,
            condition_file: None,
            out: None,
            seed: 0,
        }
    }
}

/// `(visual, speaker)` pairs from an archive holding `visual.{i}` and
/// `speaker.{i}` (datasets qualify).
pub fn read_conditions(a: &Archive) -> CmdResult<Vec<(Tensor, Tensor)>> {
    let mut out = Vec::new();
    while let Some(v) = a.get(&format!("visual.{}", out.len())) {
        let s = a.require(&format!("speaker.{}", out.len()))?;
        out.push((v.clone(), s.clone()));
    }
    if out.is_empty() {
        return Err(CmdError::usage("condition file holds no `visual.0` tensor"));
    }
    Ok(out)
}

pub fn sample(args: &SampleArgs) -> CmdResult<Value> {
    let a = load_checkpoint(&args.ckpt)?;
    let (cfg, backbone, store, step) = trainer::load_model(&a)?;
    let sampler = SamplerConfig { nfe: args.nfe };
    sampler.validate()?;
    if args.n == 0 {
        return Err(CmdError::usage("--n must be at least 1"));
    }
    let conditions = match &args.condition_file {
        Some(p) => {
            let c = Archive::load(p).map_err(|e| CmdError::usage(format!("{}: {e}", p.display())))?;
            read_conditions(&c)?
        }
        None => {
            let world = World::new(&cfg.world_config())?;
            let mut r = rng::stream(args.seed, "sample.conditions");
            (0..cfg.eval.n_conditions)
                .map(|_| {
                    let s = world.draw_sample_any_length(&mut r, cfg.eval.t_v)?;
                    Ok((s.visual, s.speaker))
                })
                .collect::<crate::Result<Vec<_>>>()?
        }
    };
    let f = cfg.backbone.upsample_factor;
    let d_a = cfg.backbone.latent_dim;
    let mut noise = rng::stream(args.seed, "sample.noise");
    let mut out = Archive::new(json!({
        "kind": "samples",
        "checkpoint_step": step,
        "nfe": args.nfe,
        "seed": args.seed,
    }));
    let mut per_eval = vec![0.0f64; args.nfe];
    let total = Instant::now();
    for (i, (visual, speaker)) in conditions.iter().enumerate() {
        if visual.rank() != 2 || visual.shape()[1] != cfg.backbone.visual_dim {
            return Err(CmdError::usage(format!(
                "condition {i}: visual shape {:?} does not match visual_dim {}",
                visual.shape(),
                cfg.backbone.visual_dim
            )));
        }
        let x_shape = [visual.shape()[0] * f, d_a];
        for k in 0..args.n {
            let x0 = Tensor::randn(&x_shape, 1.0, &mut noise);
            let mut call = 0;
            let x = flow::euler_sample(
                |x, t| {
                    let tick = Instant::now();
                    let cond = Conditioning::new(t, speaker.clone())?;
                    let v = backbone.velocity(&store, cfg.precision, x, visual, &cond);
                    per_eval[call] += tick.elapsed().as_secs_f64();
                    call += 1;
                    v
                },
                &x0,
                sampler,
            )?;
            out.push(format!("sample.{i}.{k}"), x);
        }
        out.push(format!("visual.{i}"), visual.clone());
        out.push(format!("speaker.{i}"), speaker.clone());
    }
    let total_secs = total.elapsed().as_secs_f64();
    let runs = (conditions.len() * args.n) as f64;
    let path = args
        .out
        .clone()
        .unwrap_or_else(|| args.ckpt.with_file_name("samples.bin"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    out.save(&path)?;
    let sidecar = json!({
        "samples": path,
        "checkpoint": args.ckpt,
        "checkpoint_step": step,
        "nfe": args.nfe,
        "seed": args.seed,
        "n_conditions": conditions.len(),
        "n_per_condition": args.n,
        "timings": {
            "total_seconds": total_secs,
            "per_evaluation_seconds": per_eval.iter().map(|s| s / runs).collect::<Vec<_>>(),
        },
    });
    write_json(&path.with_extension("json"), &sidecar)?;
    Ok(sidecar)
}

// ---------------------------------------------------------------- gradcheck

#[derive(Debug, Clone)]
pub struct GradcheckArgs {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub tolerance: f64,
    /// Entries checked per parameter tensor; 0 checks all of them.
    pub max_entries: usize,
    pub report: Option<PathBuf>,
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        Self {
            config: None,
            overrides: Vec::new(),
            tolerance: 1e-4,
            max_entries: 8,
            report: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Worst {
    pub name: String,
    pub max_rel_err: f64,
    pub tensor: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub tolerance: f64,
    pub step: f64,
    pub passed: bool,
    /// Worst input per primitive.
    pub primitives: Vec<Worst>,
    /// Worst parameter per model module.
    pub modules: Vec<Worst>,
    pub max_rel_err: f64,
    pub worst_tensor: String,
}

const FD_STEP: f64 = 1e-5;

fn worst_of(name: &str, r: &GradcheckReport) -> Worst {
    let w = r.worst();
    Worst {
        name: name.to_string(),
        max_rel_err: r.max_rel_err(),
        tensor: w.map(|t| t.name.clone()).unwrap_or_default(),
    }
}

fn probe(tape: &mut Tape, y: Var, seed: u64) -> crate::Result<Var> {
    let mut r = rng::stream(seed, "gradcheck.probe");
    let w = tape.constant(Tensor::randn(tape.shape(y), 1.0, &mut r))?;
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

type PrimFn = fn(&mut Tape, &[Var]) -> crate::Result<Var>;

fn primitive_cases() -> Vec<(&'static str, Vec<(&'static str, Vec<usize>)>, PrimFn)> {
    vec![
        ("linear", vec![("x", vec![3, 4]), ("w", vec![4, 5]), ("b", vec![5])], |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            probe(t, y, 1)
        }),
        ("conv1d", vec![("x", vec![3, 9]), ("k", vec![4, 3, 3]), ("b", vec![4])], |t, v| {
            let y = t.conv1d(v[0], v[1], Some(v[2]), 2, 1)?;
            probe(t, y, 2)
        }),
        (
            "transposed_conv1d",
            vec![("x", vec![3, 5]), ("k", vec![3, 2, 4]), ("b", vec![2])],
            |t, v| {
                let y = t.conv_transpose1d(v[0], v[1], Some(v[2]), 2)?;
                probe(t, y, 3)
            },
        ),
        ("depthwise_conv2d", vec![("x", vec![2, 4, 6]), ("k", vec![2, 3, 5])], |t, v| {
            let y = t.depthwise_conv2d(v[0], v[1])?;
            probe(t, y, 4)
        }),
        (
            "layer_norm",
            vec![("x", vec![3, 6]), ("gamma", vec![6]), ("beta", vec![6])],
            |t, v| {
                let y = t.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)?;
                probe(t, y, 5)
            },
        ),
        ("gelu", vec![("x", vec![4, 5])], |t, v| {
            let y = t.activation(v[0], Activation::Gelu)?;
            probe(t, y, 6)
        }),
        ("silu", vec![("x", vec![4, 5])], |t, v| {
            let y = t.activation(v[0], Activation::Silu)?;
            probe(t, y, 7)
        }),
        ("mul", vec![("a", vec![3, 4]), ("b", vec![3, 4])], |t, v| {
            let y = t.mul(v[0], v[1])?;
            probe(t, y, 8)
        }),
        ("mul_rows", vec![("x", vec![3, 4]), ("s", vec![3])], |t, v| {
            let y = t.mul_rows(v[0], v[1])?;
            probe(t, y, 9)
        }),
        ("add_rows", vec![("x", vec![3, 4]), ("s", vec![3])], |t, v| {
            let y = t.add_rows(v[0], v[1])?;
            probe(t, y, 10)
        }),
        (
            "permute_reshape",
            vec![("x", vec![2, 3, 4])],
            |t, v| {
                let p = t.permute(v[0], &[2, 0, 1])?;
                let r = t.reshape(p, &[4, 6])?;
                let tr = t.transpose(r)?;
                probe(t, tr, 11)
            },
        ),
        ("concat_slice", vec![("a", vec![2, 3]), ("b", vec![4, 3])], |t, v| {
            let c = t.concat(&[v[0], v[1]])?;
            let s = t.slice_rows(c, 1, 4)?;
            probe(t, s, 12)
        }),
        ("mse", vec![("a", vec![3, 4]), ("b", vec![3, 4])], |t, v| t.mse(v[0], v[1])),
    ]
}

/// Module label for a parameter name: `backbone.block.3.ffn.w` ->
/// `block.3`, `backbone.sola.shared.w` -> `sola`.
fn module_of(name: &str) -> String {
    let rest = name.strip_prefix("backbone.").unwrap_or(name);
    let mut parts = rest.split('.');
    let head = parts.next().unwrap_or(rest);
    match parts.next() {
        Some(idx) if idx.chars().all(|c| c.is_ascii_digit()) => format!("{head}.{idx}"),
        _ => head.to_string(),
    }
}

fn model_report(cfg: &RunConfig, max_entries: Option<usize>, prepare: &dyn Fn(&mut Tape)) -> CmdResult<GradcheckReport> {
    let mut store = ParamStore::new();
    let backbone = Backbone::new(&cfg.backbone, &mut store, &mut rng::stream(cfg.train.seed, "init"))?;
    // move the zero-initialized heads and gates off zero so every path carries gradient
    store.jitter(0.1, &mut rng::stream(cfg.train.seed, "gradcheck.jitter"));
    let aux = Auxiliaries::new(cfg.backbone.latent_dim, &cfg.aux, cfg.train.seed)?;
    let world = World::new(&cfg.world_config())?;
    let mut r = rng::stream(cfg.train.seed, "gradcheck.data");
    let s = world.draw_sample_any_length(&mut r, cfg.world.t_v_min)?;
    let x0 = Tensor::randn(s.target.shape(), 1.0, &mut r);
    let state = flow::sample_path(&x0, &s.target, 0.4)?;
    let cond = Conditioning::new(state.t, s.speaker.clone())?;
    let inputs: Vec<(String, Tensor)> = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let loss = |tape: &mut Tape, vars: &[Var]| -> crate::Result<Var> {
        let p = Bound::from_vars(vars.to_vec());
        let x_t = tape.constant(state.x_t.clone())?;
        let visual = tape.constant(s.visual.clone())?;
        let c = CondVars::constant(tape, &cond)?;
        let v = backbone.forward(tape, &p, x_t, visual, &c)?;
        let (l, _) = objectives::total_loss(tape, v, &state, cfg.weights, FmForm::Reparameterized, &aux)?;
        Ok(l)
    };
    Ok(gradcheck::check_with(&inputs, loss, FD_STEP, max_entries, prepare)?)
}

pub(crate) fn gradcheck_with(args: &GradcheckArgs, prepare: &dyn Fn(&mut Tape)) -> CmdResult<GradcheckSummary> {
    let mut cfg = load_config(args.config.as_deref(), &args.overrides)?;
    cfg.precision = Precision::F64;
    if !(args.tolerance > 0.0) {
        return Err(CmdError::usage("--tolerance must be > 0"));
    }
    let mut primitives = Vec::new();
    for (i, (name, shapes, f)) in primitive_cases().into_iter().enumerate() {
        let mut r = rng::stream(100 + i as u64, "gradcheck.inputs");
        let inputs: Vec<(String, Tensor)> = shapes
            .into_iter()
            .map(|(n, s)| (n.to_string(), Tensor::randn(&s, 1.0, &mut r)))
            .collect();
        let rep = gradcheck::check_with(&inputs, f, FD_STEP, None, prepare)?;
        primitives.push(worst_of(name, &rep));
    }
    let max_entries = (args.max_entries > 0).then_some(args.max_entries);
    let rep = model_report(&cfg, max_entries, prepare)?;
    let mut modules: Vec<(String, GradcheckReport)> = Vec::new();
    for t in rep.tensors {
        let m = module_of(&t.name);
        match modules.iter_mut().find(|(n, _)| *n == m) {
            Some((_, r)) => r.tensors.push(t),
            None => modules.push((
                m,
                GradcheckReport {
                    step: rep.step,
                    tensors: vec![t],
                },
            )),
        }
    }
    let modules: Vec<Worst> = modules.iter().map(|(n, r)| worst_of(n, r)).collect();
    let worst = primitives
        .iter()
        .map(|w| (w, format!("{}:{}", w.name, w.tensor)))
        .chain(modules.iter().map(|w| (w, w.tensor.clone())))
        .max_by(|a, b| a.0.max_rel_err.total_cmp(&b.0.max_rel_err))
        .expect("at least one check");
    Ok(GradcheckSummary {
        tolerance: args.tolerance,
        step: FD_STEP,
        passed: worst.0.max_rel_err <= args.tolerance,
        max_rel_err: worst.0.max_rel_err,
        worst_tensor: worst.1,
        primitives,
        modules,
    })
}

/// Run the checks; a summary over tolerance is returned inside the error
/// after the report has been written.
pub fn gradcheck(args: &GradcheckArgs) -> CmdResult<GradcheckSummary> {
    let s = gradcheck_with(args, &|_| {})?;
    if let Some(p) = &args.report {
        write_json(p, &s)?;
    }
    if !s.passed {
        return Err(CmdError::failure(format!(
            "gradient check failed: `{}` has relative error {:.3e} > {:.1e}",
            s.worst_tensor, s.max_rel_err, s.tolerance
        )));
    }
    Ok(s)
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub world_seed: Option<u64>,
    /// World definition to evaluate against instead of the checkpoint's.
    pub world: Option<PathBuf>,
    pub nfe: Option<usize>,
    pub report: Option<PathBuf>,
}

pub fn eval(args: &EvalArgs) -> CmdResult<EvalReport> {
    let a = load_checkpoint(&args.ckpt)?;
    let (cfg, backbone, store, step) = trainer::load_model(&a)?;
    let mut wc = match &args.world {
        Some(p) => {
            let src = fs::read_to_string(p).map_err(|e| CmdError::usage(format!("{}: {e}", p.display())))?;
            let wc: WorldConfig =
                serde_json::from_str(&src).map_err(|e| CmdError::usage(format!("{}: {e}", p.display())))?;
            let ours = cfg.world_config();
            let dims = |w: &WorldConfig| (w.visual_dim, w.latent_dim, w.speaker_dim, w.upsample_factor);
            if dims(&wc) != dims(&ours) {
                return Err(CmdError::usage(format!(
                    "world dimensions (visual, latent, speaker, upsample) {:?} do not match checkpoint {:?}",
                    dims(&wc),
                    dims(&ours)
                )));
            }
            wc
        }
        None => cfg.world_config(),
    };
    if let Some(s) = args.world_seed {
        wc.seed = s;
    }
    let world = World::new(&wc)?;
    let sampler = SamplerConfig {
        nfe: args.nfe.unwrap_or(cfg.sampler.nfe),
    };
    sampler.validate()?;
    let metrics = crate::world::eval_generation(&world, &cfg.eval, |v, s, x0| {
        trainer::generate(&backbone, &store, cfg.precision, v, s, x0, sampler)
    })?;
    let report = EvalReport {
        checkpoint_step: step,
        world_seed: wc.seed,
        nfe: sampler.nfe,
        metrics,
    };
    if let Some(p) = &args.report {
        write_json(p, &report)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------- ablate

pub const ABLATION_AXES: [&str; 5] = ["kernel", "subspaces", "losses", "repar", "backbone-rank0"];
pub const KERNEL_GRID: [(usize, usize); 4] = [(3, 5), (5, 7), (7, 9), (9, 11)];
pub const SUBSPACE_GRID: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, Default)]
pub struct AblateArgs {
    pub axis: String,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub out: PathBuf,
}

/// Named variants of `base` along `axis`, each validated.
pub fn ablation_variants(axis: &str, base: &RunConfig) -> CmdResult<Vec<(String, RunConfig)>> {
    let mut out = Vec::new();
    let mut push = |name: String, f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        out.push((name, c));
    };
    match axis {
        "kernel" => {
            for (kt, ks) in KERNEL_GRID {
                push(format!("k{kt}x{ks}"), &|c| {
                    c.backbone.kernel_time = kt;
                    c.backbone.kernel_sub = ks;
                });
            }
        }
        "subspaces" => {
            // trunk width and fused width stay fixed while S varies
            let width = base.backbone.width();
            let fused = base.backbone.subspaces * base.backbone.recomp_proj_dim;
            for s in SUBSPACE_GRID {
                push(format!("s{s}"), &|c| {
                    c.backbone.subspaces = s;
                    c.backbone.sub_channels = (width / s).max(1);
                    c.backbone.recomp_proj_dim = (fused / s).max(1);
                });
            }
        }
        "losses" => {
            push("full".into(), &|_| {});
            push("no_sem".into(), &|c| c.weights.lambda2 = 0.0);
            push("no_slm".into(), &|c| c.weights.lambda1 = 0.0);
            push("no_repar".into(), &|c| c.train.fm_form = FmForm::Velocity);
        }
        "repar" => {
            push("repar".into(), &|c| c.train.fm_form = FmForm::Reparameterized);
            push("no_repar".into(), &|c| c.train.fm_form = FmForm::Velocity);
        }
        "backbone-rank0" => {
            push(format!("rank{}", base.backbone.adaln_rank), &|_| {});
            push("rank0".into(), &|c| c.backbone.adaln_rank = 0);
        }
        other => {
            return Err(CmdError::usage(format!(
                "unknown ablation axis `{other}`; expected one of {}",
                ABLATION_AXES.join(", ")
            )))
        }
    }
    for (name, c) in &out {
        c.validate()
            .map_err(|e| CmdError::usage(format!("variant `{name}` is invalid: {e}")))?;
    }
    Ok(out)
}

pub const ABLATION_HEADER: &str = "variant,kernel_time,kernel_sub,subspaces,sub_channels,lambda1,lambda2,fm_form,adaln_rank,\
parameters,steps,final_loss_total,final_loss_fm,rel_mean_error,mean_frame_error,std_ratio,mmd2,mmd_p_value";

fn ablation_row(name: &str, c: &RunConfig, t: &Trainer, logs: &[trainer::StepLog], m: &EvalMetrics) -> String {
    // average over the last tenth of training to smooth batch noise
    let tail = &logs[logs.len() - (logs.len() / 10).max(1)..];
    let n = tail.len() as f64;
    let total = tail.iter().map(|l| l.loss.total).sum::<f64>() / n;
    let fm = tail.iter().map(|l| l.loss.fm).sum::<f64>() / n;
    let form = match c.train.fm_form {
        FmForm::Reparameterized => "reparameterized",
        FmForm::Velocity => "velocity",
    };
    let b = &c.backbone;
    format!(
        "{name},{},{},{},{},{},{},{form},{},{},{},{total},{fm},{},{},{},{},{}",
        b.kernel_time,
        b.kernel_sub,
        b.subspaces,
        b.sub_channels,
        c.weights.lambda1,
        c.weights.lambda2,
        b.adaln_rank,
        t.store.num_scalars(),
        t.step,
        m.rel_mean_error,
        m.mean_frame_error,
        m.std_ratio.map(|r| r.to_string()).unwrap_or_default(),
        m.mmd2,
        m.mmd_p_value,
    )
}

/// Train and evaluate every variant (in parallel), then write
/// `ablation_<axis>.csv` in variant order.
pub fn ablate(args: &AblateArgs) -> CmdResult<PathBuf> {
    let base = load_config(args.config.as_deref(), &args.overrides)?;
    let variants = ablation_variants(&args.axis, &base)?;
    fs::create_dir_all(&args.out)?;
    let rows = variants
        .par_iter()
        .map(|(name, c)| -> CmdResult<String> {
            let dir = args.out.join(&args.axis).join(name);
            fs::create_dir_all(&dir)?;
            write_json(&dir.join("config.json"), c)?;
            let mut t = Trainer::new(c)?;
            let logs = t.run(Some(&dir), |_| {})?;
            let m = t.evaluate()?;
            write_json(
                &dir.join("eval.json"),
                &EvalReport {
                    checkpoint_step: t.step,
                    world_seed: c.world.seed,
                    nfe: c.sampler.nfe,
                    metrics: m.clone(),
                },
            )?;
            Ok(ablation_row(name, c, &t, &logs, &m))
        })
        .collect::<CmdResult<Vec<_>>>()?;
    let path = args.out.join(format!("ablation_{}.csv", args.axis));
    let mut body = String::from(ABLATION_HEADER);
    body.push('\n');
    for r in rows {
        body.push_str(&r);
        body.push('\n');
    }
    fs::write(&path, body)?;
    Ok(path)
}

// ---------------------------------------------------------------- dataset

/// Draw `n` world samples into a dataset archive (`visual.{i}`,
/// `speaker.{i}`, `target.{i}`) usable as a fixed training corpus or as a
/// condition file.
pub fn export_dataset(cfg: &RunConfig, n: usize, seed: u64, path: &Path) -> CmdResult<Value> {
    let world = World::new(&cfg.world_config())?;
    let mut r = rng::stream(seed, "dataset");
    let mut a = Archive::new(json!({
        "kind": "dataset",
        "n": n,
        "seed": seed,
        "world": cfg.world_config(),
    }));
    for i in 0..n {
        let t_v = world.draw_t_v(&mut r);
        let s = world.draw_sample(&mut r, t_v)?;
        a.push(format!("visual.{i}"), s.visual);
        a.push(format!("speaker.{i}"), s.speaker);
        a.push(format!("target.{i}"), s.target);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    a.save(path)?;
    Ok(json!({"dataset": path, "n": n, "seed": seed}))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_args() -> GradcheckArgs {
        GradcheckArgs {
            overrides: vec![
                "backbone.subspaces=2".into(),
                "backbone.blocks=1".into(),
                "backbone.sub_channels=4".into(),
                "backbone.visual_dim=8".into(),
                "backbone.latent_dim=8".into(),
                "backbone.speaker_dim=4".into(),
                "backbone.convnext_layers=1".into(),
                "backbone.convnext_hidden=8".into(),
                "world.t_v_min=3".into(),
                "world.t_v_max=4".into(),
            ],
            max_entries: 4,
            ..Default::default()
        }
    }

    #[test]
    fn gradcheck_passes_and_names_modules() {
        let s = gradcheck_with(&tiny_args(), &|_| {}).unwrap();
        assert!(s.passed, "{s:?}");
        assert!(s.primitives.iter().any(|w| w.name == "depthwise_conv2d"));
        assert!(s.modules.iter().any(|w| w.name == "block.0"));
        assert!(s.modules.iter().any(|w| w.name == "recompose"));
    }

    #[test]
    fn sign_flipped_backward_is_detected() {
        for op in ["conv1d", "layer_norm", "mul_rows"] {
            let s = gradcheck_with(&tiny_args(), &move |t: &mut Tape| t.inject_sign_flip(op)).unwrap();
            assert!(!s.passed, "{op} flip went unnoticed");
            let p = s.primitives.iter().find(|w| w.name == op).unwrap();
            assert!(p.max_rel_err > 1e-4, "{op}: {p:?}");
        }
    }

    #[test]
    fn module_labels() {
        assert_eq!(module_of("backbone.block.3.ffn.w"), "block.3");
        assert_eq!(module_of("backbone.sola.shared.w"), "sola");
        assert_eq!(module_of("backbone.recompose.out.bias"), "recompose");
    }

    #[test]
    fn unknown_axis_is_a_usage_error() {
        let e = ablation_variants("depth", &RunConfig::default()).unwrap_err();
        assert_eq!(e.code, 2);
        assert!(e.message.contains("depth"));
    }

    #[test]
    fn ablation_grids() {
        let mut base = RunConfig::default();
        base.backbone.visual_dim = 48;
        let k = ablation_variants("kernel", &base).unwrap();
        let pairs: Vec<_> = k.iter().map(|(_, c)| (c.backbone.kernel_time, c.backbone.kernel_sub)).collect();
        assert_eq!(pairs, KERNEL_GRID);
        let s = ablation_variants("subspaces", &base).unwrap();
        let counts: Vec<_> = s.iter().map(|(_, c)| c.backbone.subspaces).collect();
        assert_eq!(counts, SUBSPACE_GRID);
        for (_, c) in &s {
            assert_eq!(c.backbone.width(), base.backbone.width());
        }
        let l = ablation_variants("losses", &base).unwrap();
        let names: Vec<_> = l.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["full", "no_sem", "no_slm", "no_repar"]);
        assert_eq!(l[3].1.train.fm_form, FmForm::Velocity);
        // the default desk dims do not split into 32 subspaces
        assert_eq!(ablation_variants("subspaces", &RunConfig::default()).unwrap_err().code, 2);
    }
}
