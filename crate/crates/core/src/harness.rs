//! Experiment harnesses: single run, parameterization × alignment ablation,
//! λ sweep, β-schedule sweep and inference-seed stability.
//!
//! Every harness is a fixed plan of [`TrainConfig`]s derived from one
//! [`ExperimentConfig`]; runs share the prepared data, codec and teacher
//! tokens and are executed in plan order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::codec::{Codec, CodecKind};
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{load_directory, split, synth_dataset, SamplePair};
use crate::error::{Error, Result};
use crate::report::{schedule_label, ExperimentReport, HarnessKind};
use crate::schedule::Parameterization;
use crate::trainer::{build_teacher, run, PreparedSet, RunOutput, TrainConfig};

pub const CODEC_FILE: &str = "codec.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct PlannedRun {
    pub id: String,
    pub config: TrainConfig,
}

fn p_short(p: Parameterization) -> &'static str {
    match p {
        Parameterization::Epsilon => "eps",
        Parameterization::V => "v",
        Parameterization::X0 => "x0",
    }
}

/// The runs a harness trains, in execution order.
pub fn plan(kind: HarnessKind, cfg: &ExperimentConfig) -> Vec<PlannedRun> {
    let base = &cfg.train;
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match kind {
        HarnessKind::Train => vec![PlannedRun { id: base.label(), config: base.clone() }],
        HarnessKind::Ablation => {
            let mut v = Vec::new();
            for p in [Parameterization::Epsilon, Parameterization::V, Parameterization::X0] {
                for aligned in [false, true] {
                    let config = with(&|c| {
                        c.parameterization = p;
                        c.alignment.enabled = aligned;
                    });
                    let id = format!("{}-{}-seed{}", p_short(p), if aligned { "align" } else { "plain" }, base.seed);
                    v.push(PlannedRun { id, config });
                }
            }
            v
        }
        HarnessKind::LambdaSweep => {
            let mut v = Vec::new();
            for &lambda in &cfg.sweep_lambdas {
                for s in 0..cfg.sweep_seeds as u64 {
                    let config = with(&|c| {
                        c.alignment.enabled = true;
                        c.alignment.lambda = lambda;
                        c.seed = base.seed + s;
                    });
                    v.push(PlannedRun { id: format!("lambda{lambda}-seed{}", base.seed + s), config });
                }
            }
            v
        }
        HarnessKind::ScheduleSweep => cfg
            .schedule_grid()
            .into_iter()
            .map(|sched| {
                let id = format!("{}-{}-{}-seed{}", sched.kind, sched.beta_start, sched.beta_end, base.seed);
                PlannedRun { id, config: with(&|c| c.schedule = sched) }
            })
            .collect(),
        HarnessKind::Stability => {
            let mut v = Vec::new();
            for p in [Parameterization::Epsilon, Parameterization::X0] {
                for s in 0..cfg.replicates as u64 {
                    let config = with(&|c| {
                        c.parameterization = p;
                        c.seed = base.seed + s;
                    });
                    v.push(PlannedRun { id: format!("{}-seed{}", p_short(p), base.seed + s), config });
                }
            }
            v
        }
    }
}

/// Human-readable plan for `--dry-run`.
pub fn describe_plan(kind: HarnessKind, cfg: &ExperimentConfig) -> String {
    let runs = plan(kind, cfg);
    let mut out = format!("{kind}: {} run(s), config digest {}\n", runs.len(), cfg.digest());
    let data = match &cfg.data.source {
        DataSource::Synthetic => format!(
            "synthetic (seed {}, {} train / {} val / {} test)",
            cfg.data.seed, cfg.data.train_count, cfg.data.val_count, cfg.data.test_count
        ),
        DataSource::Directory(p) => format!("{} (80/10/10 split)", p.display()),
    };
    let _ = writeln!(out, "data: {data}, resolution {}", cfg.resolution);
    let codec = match &cfg.codec_path {
        Some(p) => format!("load {}", p.display()),
        None if cfg.codec.kind == CodecKind::PixelSpace => "pixel_space (no training)".into(),
        None => format!("train toy_ae for {} steps (seed {})", cfg.codec.train_steps, cfg.codec_seed),
    };
    let _ = writeln!(out, "codec: {codec}");
    let _ = writeln!(out, "evaluation: {} inference seeds on the test split", cfg.eval_seeds);
    let _ = writeln!(out, "output: {}", cfg.output_dir.display());
    for r in &runs {
        let c = &r.config;
        let align = if c.alignment.enabled { format!("λ={}", c.alignment.lambda) } else { "off".into() };
        let _ = writeln!(
            out,
            "  {:<28} param={:<7} align={:<8} schedule={:<26} seed={} steps={}",
            r.id,
            c.parameterization.to_string(),
            align,
            schedule_label(&c.schedule),
            c.seed,
            c.max_steps
        );
    }
    out
}

/// Train and test samples per the data configuration. Validation samples
/// are split off but unused.
pub fn load_samples(cfg: &ExperimentConfig) -> Result<(Vec<SamplePair>, Vec<SamplePair>)> {
    match &cfg.data.source {
        DataSource::Synthetic => {
            let d = &cfg.data;
            let mut all = synth_dataset(d.train_count + d.val_count + d.test_count, d.seed, cfg.resolution)?;
            let test = all.split_off(d.train_count + d.val_count);
            all.truncate(d.train_count);
            Ok((all, test))
        }
        DataSource::Directory(root) => {
            let s = split(load_directory(root, cfg.resolution)?);
            if s.train.is_empty() || s.test.is_empty() {
                return Err(Error::Validation(format!("{} has too few samples to split", root.display())));
            }
            Ok((s.train, s.test))
        }
    }
}

/// Load, build or train the frozen codec. A trained codec is cached in
/// `cache_dir` when given.
pub fn obtain_codec(cfg: &ExperimentConfig, train: &[SamplePair], cache_dir: Option<&Path>) -> Result<Codec> {
    if let Some(p) = &cfg.codec_path {
        let codec = Codec::load(p)?;
        if codec.header().resolution != cfg.resolution {
            return Err(Error::config(
                "codec.path",
                format!("codec was trained at resolution {}, config has {}", codec.header().resolution, cfg.resolution),
            ));
        }
        return Ok(codec);
    }
    let codec = match cfg.codec.kind {
        CodecKind::PixelSpace => Codec::pixel_space(cfg.codec.clone(), cfg.resolution)?,
        CodecKind::ToyAe => Codec::train(&cfg.codec, train, cfg.codec_seed)?,
    };
    if let Some(dir) = cache_dir {
        codec.save(&dir.join(CODEC_FILE))?;
    }
    Ok(codec)
}

/// Data, codec and teacher tokens shared by every run of a harness.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub codec: Codec,
    pub train: PreparedSet,
    pub test: PreparedSet,
    pub teacher_digest: Option<String>,
}

impl Experiment {
    /// `with_teacher` precomputes teacher tokens for both splits.
    pub fn prepare(cfg: &ExperimentConfig, with_teacher: bool, cache_dir: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        let (train, test) = load_samples(cfg)?;
        let codec = obtain_codec(cfg, &train, cache_dir)?;
        let teacher = if with_teacher { Some(build_teacher(&cfg.train, cfg.resolution)?) } else { None };
        let train = PreparedSet::new(&codec, train, teacher.as_deref())?;
        let test = PreparedSet::new(&codec, test, teacher.as_deref())?;
        Ok(Experiment { config: cfg.clone(), codec, train, test, teacher_digest: teacher.map(|t| t.digest()) })
    }

    pub fn for_harness(kind: HarnessKind, cfg: &ExperimentConfig, cache_dir: Option<&Path>) -> Result<Self> {
        let needs_teacher = plan(kind, cfg).iter().any(|r| r.config.alignment.enabled);
        Self::prepare(cfg, needs_teacher, cache_dir)
    }

    pub fn run_one(&self, planned: &PlannedRun, checkpoint_dir: Option<&Path>) -> Result<RunOutput> {
        let seeds = self.config.eval_seed_list();
        let mut out = run(&planned.config, &self.codec, &self.train, &self.test, &seeds, checkpoint_dir)?;
        out.result.run_id = planned.id.clone();
        Ok(out)
    }

    /// Train every planned run. With an output directory, each run's
    /// inference bundle is saved under `checkpoints/<run id>.bundle`.
    pub fn execute(&self, kind: HarnessKind, output_dir: Option<&Path>) -> Result<ExperimentReport> {
        let started = Instant::now();
        let ckpt = output_dir.map(checkpoints_dir);
        let planned = plan(kind, &self.config);
        let mut runs = Vec::with_capacity(planned.len());
        for (i, p) in planned.iter().enumerate() {
            log::info!("[{}/{}] {}", i + 1, planned.len(), p.id);
            let run_ckpt = ckpt.as_ref().map(|d| d.join(&p.id));
            let out = self.run_one(p, run_ckpt.as_deref())?;
            if let Some(d) = &ckpt {
                out.bundle.save(&d.join(format!("{}.bundle", p.id)))?;
            }
            runs.push(out.result);
        }
        let report = ExperimentReport {
            kind,
            config: self.config.clone(),
            config_digest: self.config.digest(),
            train_digest: self.train.digest.clone(),
            test_digest: self.test.digest.clone(),
            codec_digest: self.codec.digest(),
            teacher_digest: self.teacher_digest.clone(),
            codec: self.codec.header().clone(),
            runs,
            wall_clock_s: started.elapsed().as_secs_f64(),
        };
        if let Some(dir) = output_dir {
            report.save(dir)?;
            report.render(dir)?;
        }
        Ok(report)
    }
}

pub fn checkpoints_dir(output_dir: &Path) -> PathBuf {
    output_dir.join("checkpoints")
}

/// Prepare, train and report in one call.
pub fn run_harness(kind: HarnessKind, cfg: &ExperimentConfig, output_dir: Option<&Path>) -> Result<ExperimentReport> {
    let cache = output_dir.map(checkpoints_dir);
    if let Some(d) = &cache {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    Experiment::for_harness(kind, cfg, cache.as_deref())?.execute(kind, output_dir)
}
