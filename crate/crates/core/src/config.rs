//! Flat `key = value` run configuration.
//!
//! Every key is explicit; unknown keys are rejected so that a typo can never
//! silently fall back to a default. The resolved configuration (all keys, including
//! defaults) is written next to every report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

use crate::alignment::TeacherKind;
use crate::codec::CodecConfig;
use crate::error::{Error, Result};
use crate::schedule::BetaScheduleConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Generated shapes; split positionally into train / val / test counts.
    Synthetic,
    /// `images/` + `masks/` directory; split 80/10/10.
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { source: DataSource::Synthetic, seed: 0, train_count: 200, val_count: 0, test_count: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub resolution: usize,
    pub codec: CodecConfig,
    /// Load a trained codec instead of training one.
    pub codec_path: Option<PathBuf>,
    pub codec_seed: u64,
    pub train: TrainConfig,
    /// Inference seeds `0..eval_seeds` used for every reported Dice.
    pub eval_seeds: usize,
    pub sweep_lambdas: Vec<f64>,
    /// Training seeds `0..sweep_seeds` for the λ sweep.
    pub sweep_seeds: usize,
    /// Training seeds `0..replicates` for the stability harness.
    pub replicates: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            resolution: 64,
            codec: CodecConfig::default(),
            codec_path: None,
            codec_seed: 0,
            train: TrainConfig::default(),
            eval_seeds: 10,
            sweep_lambdas: vec![0.0, 0.15, 0.25, 0.5, 0.75, 1.0, 1.25],
            sweep_seeds: 1,
            replicates: 1,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

fn as_uint(key: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(Error::config(key, format!("expected a non-negative integer, got {v}"))),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    as_uint(key, v).map(|u| u as usize)
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(Error::config(key, format!("expected a number, got {v}"))),
    }
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| Error::config(key, format!("expected true or false, got {v}")))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| Error::config(key, format!("expected a quoted string, got {v}")))
}

fn as_array<'a>(key: &str, v: &'a Value) -> Result<&'a [Value]> {
    v.as_array().map(|a| a.as_slice()).ok_or_else(|| Error::config(key, format!("expected an array, got {v}")))
}

fn parse_teacher(s: &str) -> Result<TeacherKind> {
    if s == "frozen_random" {
        Ok(TeacherKind::FrozenRandom)
    } else if let Some(dir) = s.strip_prefix("external:") {
        Ok(TeacherKind::External(PathBuf::from(dir)))
    } else {
        Err(Error::config("alignment.teacher", format!("expected `frozen_random` or `external:<dir>`, got `{s}`")))
    }
}

fn reparse<T: std::str::FromStr<Err = Error>>(key: &str, s: &str) -> Result<T> {
    s.parse().map_err(|e| match e {
        Error::Config { reason, .. } => Error::config(key, reason),
        other => other,
    })
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    /// `overrides` are `key=value` pairs applied after the file; a value that
    /// is not a TOML literal is taken as a bare string.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| Error::config("<syntax>", e.message().to_string()))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat);
        for o in overrides {
            let (k, v) =
                o.split_once('=').ok_or_else(|| Error::config(o.as_str(), "override must have the form key=value"))?;
            let (k, v) = (k.trim(), v.trim());
            let value = toml::from_str::<toml::Table>(&format!("v = {v}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| Value::String(v.to_string()));
            flat.push((k.to_string(), value));
        }
        let mut cfg = ExperimentConfig::default();
        for (key, v) in &flat {
            cfg.apply(key, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn apply(&mut self, key: &str, v: &Value) -> Result<()> {
        let t = &mut self.train;
        match key {
            "resolution" => self.resolution = as_usize(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(as_str(key, v)?),
            "seed" => t.seed = as_uint(key, v)?,
            "parameterization" => t.parameterization = reparse(key, as_str(key, v)?)?,

            "data.source" => {
                let s = as_str(key, v)?;
                self.data.source = match s {
                    "synthetic" => DataSource::Synthetic,
                    _ => DataSource::Directory(PathBuf::from(s)),
                };
            }
            "data.seed" => self.data.seed = as_uint(key, v)?,
            "data.train_count" => self.data.train_count = as_usize(key, v)?,
            "data.val_count" => self.data.val_count = as_usize(key, v)?,
            "data.test_count" => self.data.test_count = as_usize(key, v)?,

            "codec.kind" => self.codec.kind = reparse(key, as_str(key, v)?)?,
            "codec.downsample" => self.codec.downsample = as_usize(key, v)?,
            "codec.latent_channels" => self.codec.latent_channels = as_usize(key, v)?,
            "codec.base_channels" => self.codec.base_channels = as_usize(key, v)?,
            "codec.train_steps" => self.codec.train_steps = as_usize(key, v)?,
            "codec.batch_size" => self.codec.batch_size = as_usize(key, v)?,
            "codec.lr" => self.codec.lr = as_f64(key, v)?,
            "codec.threshold" => self.codec.threshold = as_f64(key, v)? as f32,
            "codec.seed" => self.codec_seed = as_uint(key, v)?,
            "codec.path" => {
                let s = as_str(key, v)?;
                self.codec_path = if s.is_empty() { None } else { Some(PathBuf::from(s)) };
            }

            "schedule.kind" => t.schedule.kind = reparse(key, as_str(key, v)?)?,
            "schedule.beta_start" => t.schedule.beta_start = as_f64(key, v)?,
            "schedule.beta_end" => t.schedule.beta_end = as_f64(key, v)?,
            "schedule.num_steps" => t.schedule.num_steps = as_usize(key, v)?,

            "denoiser.base_channels" => t.denoiser.base_channels = as_usize(key, v)?,
            "denoiser.channel_mults" => {
                t.denoiser.channel_mults = as_array(key, v)?.iter().map(|x| as_usize(key, x)).collect::<Result<_>>()?;
            }
            "denoiser.norm_groups" => t.denoiser.norm_groups = as_usize(key, v)?,

            "train.batch_size" => t.batch_size = as_usize(key, v)?,
            "train.lr" => t.lr = as_f64(key, v)?,
            "train.warmup_steps" => t.warmup_steps = as_usize(key, v)?,
            "train.max_steps" => t.max_steps = as_usize(key, v)?,
            "train.weight_decay" => t.weight_decay = as_f64(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = as_usize(key, v)?,

            "alignment.enabled" => t.alignment.enabled = as_bool(key, v)?,
            "alignment.lambda" => t.alignment.lambda = as_f64(key, v)?,
            "alignment.teacher" => t.alignment.teacher = parse_teacher(as_str(key, v)?)?,
            "alignment.tap_block" => t.denoiser.tap_block = as_usize(key, v)?,
            "alignment.teacher_seed" => t.teacher_seed = as_uint(key, v)?,
            "alignment.teacher_patch" => t.alignment.teacher_patch = as_usize(key, v)?,
            "alignment.teacher_dim" => t.alignment.teacher_dim = as_usize(key, v)?,
            "alignment.teacher_depth" => t.alignment.teacher_depth = as_usize(key, v)?,
            "alignment.teacher_heads" => t.alignment.teacher_heads = as_usize(key, v)?,
            "alignment.head_hidden" => t.alignment.head_hidden = as_usize(key, v)?,

            "eval.seeds" => self.eval_seeds = as_usize(key, v)?,
            "sweep.lambdas" => {
                self.sweep_lambdas = as_array(key, v)?.iter().map(|x| as_f64(key, x)).collect::<Result<_>>()?;
            }
            "sweep.seeds" => self.sweep_seeds = as_usize(key, v)?,
            "stability.replicates" => self.replicates = as_usize(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(Error::config("resolution", "must be at least 8"));
        }
        if !self.resolution.is_multiple_of(self.codec.downsample) {
            return Err(Error::config("resolution", "must be divisible by codec.downsample"));
        }
        if self.data.source == DataSource::Synthetic && (self.data.train_count == 0 || self.data.test_count == 0) {
            return Err(Error::config("data.train_count", "synthetic data needs train and test samples"));
        }
        if self.eval_seeds == 0 {
            return Err(Error::config("eval.seeds", "must be positive"));
        }
        if self.sweep_lambdas.is_empty() {
            return Err(Error::config("sweep.lambdas", "must not be empty"));
        }
        if let Some(l) = self.sweep_lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(Error::config("sweep.lambdas", format!("must be finite and >= 0, got {l}")));
        }
        if self.sweep_seeds == 0 {
            return Err(Error::config("sweep.seeds", "must be positive"));
        }
        if self.replicates == 0 {
            return Err(Error::config("stability.replicates", "must be positive"));
        }
        let a = &self.train.alignment;
        if a.enabled
            && a.teacher == TeacherKind::FrozenRandom
            && !self.resolution.is_multiple_of(a.teacher_patch.max(1))
        {
            return Err(Error::config("alignment.teacher_patch", "must divide the resolution"));
        }
        self.codec.validate()?;
        self.train.validate()
    }

    /// Every key with its effective value, in a stable order; parses back to
    /// an equal configuration.
    pub fn to_resolved_string(&self) -> String {
        let t = &self.train;
        let path = |p: &Path| Value::String(p.display().to_string());
        let int = |u: u64| Value::Integer(u as i64);
        let source = match &self.data.source {
            DataSource::Synthetic => Value::String("synthetic".into()),
            DataSource::Directory(p) => path(p),
        };
        let entries: Vec<(&str, Value)> = vec![
            ("resolution", int(self.resolution as u64)),
            ("output_dir", path(&self.output_dir)),
            ("seed", int(t.seed)),
            ("parameterization", Value::String(t.parameterization.to_string())),
            ("data.source", source),
            ("data.seed", int(self.data.seed)),
            ("data.train_count", int(self.data.train_count as u64)),
            ("data.val_count", int(self.data.val_count as u64)),
            ("data.test_count", int(self.data.test_count as u64)),
            ("codec.kind", Value::String(self.codec.kind.to_string())),
            ("codec.downsample", int(self.codec.downsample as u64)),
            ("codec.latent_channels", int(self.codec.latent_channels as u64)),
            ("codec.base_channels", int(self.codec.base_channels as u64)),
            ("codec.train_steps", int(self.codec.train_steps as u64)),
            ("codec.batch_size", int(self.codec.batch_size as u64)),
            ("codec.lr", Value::Float(self.codec.lr)),
            ("codec.threshold", Value::Float(self.codec.threshold as f64)),
            ("codec.seed", int(self.codec_seed)),
            ("codec.path", self.codec_path.as_deref().map(path).unwrap_or_else(|| Value::String(String::new()))),
            ("schedule.kind", Value::String(t.schedule.kind.to_string())),
            ("schedule.beta_start", Value::Float(t.schedule.beta_start)),
            ("schedule.beta_end", Value::Float(t.schedule.beta_end)),
            ("schedule.num_steps", int(t.schedule.num_steps as u64)),
            ("denoiser.base_channels", int(t.denoiser.base_channels as u64)),
            ("denoiser.channel_mults", Value::Array(t.denoiser.channel_mults.iter().map(|&m| int(m as u64)).collect())),
            ("denoiser.norm_groups", int(t.denoiser.norm_groups as u64)),
            ("train.batch_size", int(t.batch_size as u64)),
            ("train.lr", Value::Float(t.lr)),
            ("train.warmup_steps", int(t.warmup_steps as u64)),
            ("train.max_steps", int(t.max_steps as u64)),
            ("train.weight_decay", Value::Float(t.weight_decay)),
            ("train.checkpoint_every", int(t.checkpoint_every as u64)),
            ("alignment.enabled", Value::Boolean(t.alignment.enabled)),
            ("alignment.lambda", Value::Float(t.alignment.lambda)),
            ("alignment.teacher", Value::String(t.alignment.teacher.to_string())),
            ("alignment.tap_block", int(t.denoiser.tap_block as u64)),
            ("alignment.teacher_seed", int(t.teacher_seed)),
            ("alignment.teacher_patch", int(t.alignment.teacher_patch as u64)),
            ("alignment.teacher_dim", int(t.alignment.teacher_dim as u64)),
            ("alignment.teacher_depth", int(t.alignment.teacher_depth as u64)),
            ("alignment.teacher_heads", int(t.alignment.teacher_heads as u64)),
            ("alignment.head_hidden", int(t.alignment.head_hidden as u64)),
            ("eval.seeds", int(self.eval_seeds as u64)),
            ("sweep.lambdas", Value::Array(self.sweep_lambdas.iter().map(|&l| Value::Float(l)).collect())),
            ("sweep.seeds", int(self.sweep_seeds as u64)),
            ("stability.replicates", int(self.replicates as u64)),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_resolved_string().as_bytes()))
    }

    pub fn eval_seed_list(&self) -> Vec<u64> {
        (0..self.eval_seeds as u64).collect()
    }

    /// Five schedules at this configuration's `T`.
    pub fn schedule_grid(&self) -> Vec<BetaScheduleConfig> {
        BetaScheduleConfig::sweep_grid(self.train.schedule.num_steps)
    }
}
