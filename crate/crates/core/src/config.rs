//! Run configuration: JSON in, validated before any compute.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::flow::SamplerConfig;
use crate::objectives::{AuxConfig, FmForm, ObjectiveWeights};
use crate::optim::AdamWConfig;
use crate::tensor::Precision;
use crate::world::{EvalConfig, WorldConfig};

/// World settings that are not implied by the backbone dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    pub seed: u64,
    pub t_v_min: usize,
    pub t_v_max: usize,
    pub noise_std: f64,
    pub n_speakers: usize,
}

impl Default for WorldSection {
    fn default() -> Self {
        let w = WorldConfig::default();
        Self {
            seed: w.seed,
            t_v_min: w.t_v_min,
            t_v_max: w.t_v_max,
            noise_std: w.noise_std,
            n_speakers: w.n_speakers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub seed: u64,
    /// Steps between evaluations written to `eval_log.jsonl`; 0 disables.
    pub eval_every: u64,
    /// Steps between checkpoint writes; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub fm_form: FmForm,
    pub optimizer: AdamWConfig,
    /// Fixed corpus archive to draw batches from instead of the live world.
    pub dataset: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 2e-3,
            min_lr: 0.0,
            warmup_steps: 100,
            total_steps: 3000,
            batch_size: 8,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 0,
            checkpoint_every: 500,
            fm_form: FmForm::Reparameterized,
            optimizer: AdamWConfig::default(),
            dataset: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("train.total_steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.base_lr >= 0.0) || !(self.min_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config("train.base_lr and train.min_lr must be finite and >= 0".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("train.grad_clip must be > 0".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldSection,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub weights: ObjectiveWeights,
    pub aux: AuxConfig,
    pub eval: EvalConfig,
    pub precision: Precision,
    pub out_dir: Option<String>,
}

/// A configuration problem tied to a source line when one can be found.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// 1-based line of the first `"key"` occurrence in `source`.
fn anchor(source: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    source
        .lines()
        .position(|l| l.contains(&needle))
        .map(|i| i + 1)
}

/// Parse `key=value`; the value is JSON when it parses, a string otherwise.
fn apply_override(root: &mut Value, spec: &str) -> std::result::Result<(), String> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("override `{spec}` is not of the form key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| format!("override `{path}`: `{}` is not a section", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

impl RunConfig {
    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            seed: self.world.seed,
            visual_dim: self.backbone.visual_dim,
            latent_dim: self.backbone.latent_dim,
            speaker_dim: self.backbone.speaker_dim,
            upsample_factor: self.backbone.upsample_factor,
            t_v_min: self.world.t_v_min,
            t_v_max: self.world.t_v_max,
            noise_std: self.world.noise_std,
            n_speakers: self.world.n_speakers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.world_config().validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        self.weights.validate()?;
        self.aux.validate()?;
        if self.eval.n_draws < 2 || self.eval.n_conditions == 0 || self.eval.t_v == 0 {
            return Err(Error::Config("eval needs n_conditions >= 1, n_draws >= 2, t_v >= 1".into()));
        }
        Ok(())
    }

    /// Parse `source` (JSON, may be empty for defaults), apply dotted
    /// overrides and validate. Errors carry the source line when known.
    pub fn parse(source: &str, overrides: &[String]) -> std::result::Result<Self, ConfigError> {
        let mut root: Value = if source.trim().is_empty() {
            Value::Object(Default::default())
        } else {
            serde_json::from_str(source).map_err(|e| ConfigError {
                line: Some(e.line()),
                message: e.to_string(),
            })?
        };
        for o in overrides {
            apply_override(&mut root, o).map_err(|message| ConfigError { line: None, message })?;
        }
        let with_lines = overrides.is_empty();
        let cfg: RunConfig = serde_json::from_value(root).map_err(|e| {
            let msg = e.to_string();
            // unknown-field messages name the key in backticks
            let line = msg
                .split('`')
                .nth(1)
                .filter(|_| with_lines)
                .and_then(|k| anchor(source, k));
            ConfigError { line, message: msg }
        })?;
        cfg.validate().map_err(|e| {
            let msg = e.to_string();
            let key = msg
                .split(|c: char| !(c.is_alphanumeric() || c == '_' || c == '.'))
                .find(|w| w.contains('_') || w.contains('.'))
                .map(|w| w.rsplit('.').next().unwrap_or(w).to_string());
            ConfigError {
                line: key.and_then(|k| anchor(source, &k)),
                message: msg,
            }
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> std::result::Result<Self, ConfigError> {
        let source = std::fs::read_to_string(path).map_err(|e| ConfigError {
            line: None,
            message: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&source, overrides).map_err(|mut e| {
            e.message = format!("{}: {}", path.display(), e.message);
            e
        })
    }

    /// Published architecture and optimizer constants.
    pub fn paper() -> Self {
        Self {
            backbone: BackboneConfig::paper(),
            train: TrainConfig {
                base_lr: 2e-4,
                total_steps: 150_000,
                batch_size: 16,
                ..Default::default()
            },
            ..Default::default()
        }
    }
}
