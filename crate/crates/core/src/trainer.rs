//! Fine-tuning loop: noise the mask latent, predict from
//! `concat(E_θ(x), z_t)`, minimise `L1 + λ·L_distill` with AdamW.

use std::path::Path;
use std::time::Instant;

use latseg_nn::{AdamW, AdamWConfig, Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::alignment::{
    AlignmentConfig, ExternalTeacher, ProjectionHead, RandomPatchTeacher, TeacherKind, TeacherProvider, COSINE_EPS,
};
use crate::checkpoint::Container;
use crate::codec::{stack_images, Codec};
use crate::data::{dataset_digest, SamplePair};
use crate::denoiser::{DenoiserConfig, DenoiserNet};
use crate::error::{Error, Result};
use crate::inference::{feature_alignment, InferenceBundle, StabilityResult};
use crate::rng::{stream, Stream, StreamRng};
use crate::schedule::{
    build_schedule, forward_noise, training_target, BetaScheduleConfig, NoiseSchedule, Parameterization,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub parameterization: Parameterization,
    pub schedule: BetaScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub alignment: AlignmentConfig,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Seed of the frozen random teacher; shared by every run so that runs
    /// differing in `seed` align to the same features.
    pub teacher_seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            parameterization: Parameterization::X0,
            schedule: BetaScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            alignment: AlignmentConfig::default(),
            batch_size: 4,
            lr: 4e-5,
            warmup_steps: 100,
            max_steps: 2000,
            weight_decay: 0.01,
            seed: 0,
            teacher_seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.denoiser.validate()?;
        self.alignment.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive and finite"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("train.max_steps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be >= 0"));
        }
        Ok(())
    }

    /// Warmup-constant schedule; `update` counts optimizer steps from 1.
    pub fn lr_at(&self, update: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        self.lr * (update as f64 / self.warmup_steps as f64).min(1.0)
    }

    pub fn label(&self) -> String {
        let mut s = format!("{}-seed{}", self.parameterization, self.seed);
        if self.alignment.enabled {
            s.push_str(&format!("-align{}", self.alignment.lambda));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub pred: f64,
    /// Absent when alignment is not constructed.
    pub distill: Option<f64>,
    pub total: f64,
    pub lr: f64,
}

/// Samples with their frozen-codec mask latents and, when needed, teacher
/// tokens — computed once and shared by every run on the same split.
pub struct PreparedSet {
    pub samples: Vec<SamplePair>,
    /// `E(y)` per sample, `[C_lat, h, w]`.
    pub mask_latents: Vec<Tensor<f32>>,
    /// Teacher tokens per sample, `[L, D]`.
    pub teacher_tokens: Option<Vec<Tensor<f32>>>,
    pub digest: String,
}

pub fn build_teacher(cfg: &TrainConfig, resolution: usize) -> Result<Box<dyn TeacherProvider>> {
    Ok(match &cfg.alignment.teacher {
        TeacherKind::FrozenRandom => {
            let mut rng = stream(cfg.teacher_seed, Stream::TeacherInit);
            Box::new(RandomPatchTeacher::new(&cfg.alignment, resolution, &mut rng)?)
        }
        TeacherKind::External(dir) => Box::new(ExternalTeacher::new(dir.clone(), cfg.alignment.teacher_dim)),
    })
}

impl PreparedSet {
    pub fn new(codec: &Codec, samples: Vec<SamplePair>, teacher: Option<&dyn TeacherProvider>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Validation("dataset split is empty".into()));
        }
        let mut mask_latents = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(16) {
            let z = codec.encode_mask(&chunk.iter().map(|s| &s.mask).collect::<Vec<_>>())?;
            mask_latents.extend((0..chunk.len()).map(|i| z.select(i)));
        }
        let teacher_tokens = match teacher {
            Some(t) => Some(samples.iter().map(|s| t.tokens(&s.image, &s.id)).collect::<Result<Vec<_>>>()?),
            None => None,
        };
        let digest = dataset_digest(&samples);
        Ok(PreparedSet { samples, mask_latents, teacher_tokens, digest })
    }

    pub fn with_teacher(&mut self, teacher: &dyn TeacherProvider) -> Result<()> {
        if self.teacher_tokens.is_none() {
            let tokens = self.samples.iter().map(|s| teacher.tokens(&s.image, &s.id)).collect::<Result<Vec<_>>>()?;
            self.teacher_tokens = Some(tokens);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.samples[0].resolution()
    }
}

struct Alignment {
    head: ProjectionHead,
    store: ParamStore<f32>,
    opt: AdamW<f32>,
    lambda: f32,
    tokens: usize,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    codec: &'a Codec,
    data: &'a PreparedSet,
    schedule: NoiseSchedule,
    denoiser: DenoiserNet,
    unet: ParamStore<f32>,
    unet_opt: AdamW<f32>,
    encoder: crate::codec::LearnableEncoder,
    enc_opt: Option<AdamW<f32>>,
    align: Option<Alignment>,
    batches: StreamRng,
    noise: StreamRng,
    order: Vec<usize>,
    step: usize,
}

/// The U-Net before any fine-tuning: initialised for `C_lat` inputs, then
/// widened to `2·C_lat` by weight halving.
pub fn initial_denoiser(cfg: &TrainConfig, latent_channels: usize) -> Result<(DenoiserNet, ParamStore<f32>)> {
    let dcfg = DenoiserConfig { latent_channels, ..cfg.denoiser.clone() };
    let mut store = ParamStore::new();
    let mut rng = stream(cfg.seed, Stream::DenoiserInit);
    let mut net = DenoiserNet::new(&mut store, &dcfg, &mut rng)?;
    net.duplicate_input_layer(&mut store)?;
    Ok((net, store))
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, codec: &'a Codec, data: &'a PreparedSet) -> Result<Self> {
        cfg.validate()?;
        let schedule = build_schedule(cfg.schedule)?;
        let latent = codec.latent_size(data.resolution());
        let (denoiser, unet) = initial_denoiser(cfg, codec.latent_channels())?;
        denoiser.config().check_latent_size(latent)?;
        let opt_cfg = AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
        let unet_opt = AdamW::new(&unet, opt_cfg);
        let encoder = codec.learnable_encoder();
        let enc_opt = encoder.store().map(|s| AdamW::new(s, opt_cfg));
        let align = if cfg.alignment.enabled {
            let tokens = data.teacher_tokens.as_ref().ok_or_else(|| {
                Error::State("alignment is enabled but the training set has no teacher tokens".into())
            })?;
            let l = tokens[0].shape()[0];
            let tap = denoiser.config().tap_size(latent);
            if tap * tap != l {
                return Err(Error::AlignmentShape { hw: tap * tap, tokens: l });
            }
            let mut store = ParamStore::new();
            let mut rng = stream(cfg.seed, Stream::HeadInit);
            let head = ProjectionHead::new(
                &mut store,
                denoiser.config().tap_channels(),
                cfg.alignment.head_hidden,
                tokens[0].shape()[1],
                &mut rng,
            );
            let opt = AdamW::new(&store, opt_cfg);
            Some(Alignment { head, store, opt, lambda: cfg.alignment.lambda as f32, tokens: l })
        } else {
            None
        };
        Ok(Trainer {
            cfg: cfg.clone(),
            codec,
            data,
            schedule,
            denoiser,
            unet,
            unet_opt,
            encoder,
            enc_opt,
            align,
            batches: stream(cfg.seed, Stream::Batches),
            noise: stream(cfg.seed, Stream::Noise),
            order: Vec::new(),
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn unet(&self) -> &ParamStore<f32> {
        &self.unet
    }

    pub fn encoder(&self) -> &crate::codec::LearnableEncoder {
        &self.encoder
    }

    pub fn head(&self) -> Option<(&ProjectionHead, &ParamStore<f32>)> {
        self.align.as_ref().map(|a| (&a.head, &a.store))
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        while batch.len() < self.cfg.batch_size {
            if self.order.is_empty() {
                self.order = (0..self.data.len()).collect();
                self.order.shuffle(&mut self.batches);
            }
            batch.push(self.order.pop().expect("refilled"));
        }
        batch
    }

    /// One optimizer update on the next batch.
    pub fn train_step(&mut self) -> Result<LossRecord> {
        let idx = self.next_batch();
        let t_max = self.schedule.num_steps();
        let ts: Vec<usize> = idx.iter().map(|_| self.noise.random_range(1..=t_max)).collect();
        let mut z_t = Vec::with_capacity(idx.len());
        let mut targets = Vec::with_capacity(idx.len());
        for (&i, &t) in idx.iter().zip(&ts) {
            let zy = &self.data.mask_latents[i];
            let eps = Tensor::from_fn(zy.shape(), |_| StandardNormal.sample(&mut self.noise));
            z_t.push(forward_noise(zy, &eps, t, &self.schedule)?);
            targets.push(training_target(zy, &eps, t, self.cfg.parameterization, &self.schedule)?);
        }
        let z_t = Tensor::stack(&z_t.iter().collect::<Vec<_>>())?;
        let target = Tensor::stack(&targets.iter().collect::<Vec<_>>())?;
        let picked: Vec<&SamplePair> = idx.iter().map(|&i| &self.data.samples[i]).collect();
        let images = stack_images(&picked)?;

        let mut g = Graph::new();
        let zx = self.encoder.forward(&mut g, &images, true)?;
        let zt = g.constant(z_t);
        let input = g.concat_channels(&[zx, zt])?;
        let out = self.denoiser.forward(&mut g, &self.unet, input, &ts, true)?;
        let l_pred = g.mean_abs_diff(out.pred, target.clone())?;
        let (total, l_distill) = match &self.align {
            Some(a) => {
                let tokens = self.data.teacher_tokens.as_ref().expect("checked at construction");
                let h = Tensor::concat_batch(&idx.iter().map(|&i| &tokens[i]).collect::<Vec<_>>())?;
                let p = a.head.project(&mut g, &a.store, out.tap, a.tokens, true)?;
                let ld = g.cosine_distill(p, h, COSINE_EPS as f32)?;
                let weighted = g.scale(ld, a.lambda);
                (g.add(l_pred, weighted)?, Some(ld))
            }
            None => (l_pred, None),
        };
        let total_v = g.value(total).item() as f64;
        let pred_v = g.value(l_pred).item() as f64;
        let distill_v = l_distill.map(|v| g.value(v).item() as f64);
        if !total_v.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                diagnostics: format!(
                    "t = {ts:?}, |pred| = {:.4e}, |target| = {:.4e}, |z^x| = {:.4e}, L_pred = {pred_v}, L_distill = {distill_v:?}",
                    g.value(out.pred).l2_norm(),
                    target.l2_norm(),
                    g.value(zx).l2_norm(),
                ),
            });
        }
        let grads = g.backward(total)?;
        let lr = self.cfg.lr_at(self.step + 1);
        let gu = grads.for_store(&self.unet);
        self.unet_opt.step(&mut self.unet, &gu, lr)?;
        if let (Some(opt), Some(store)) = (self.enc_opt.as_mut(), self.encoder.store_mut()) {
            let ge = grads.for_store(store);
            opt.step(store, &ge, lr)?;
        }
        if let Some(a) = self.align.as_mut() {
            let gh = grads.for_store(&a.store);
            a.opt.step(&mut a.store, &gh, lr)?;
        }
        let rec = LossRecord { step: self.step, pred: pred_v, distill: distill_v, total: total_v, lr };
        self.step += 1;
        Ok(rec)
    }

    /// Run to `max_steps`, checkpointing into `checkpoint_dir` if configured.
    pub fn train(&mut self, checkpoint_dir: Option<&Path>) -> Result<Vec<LossRecord>> {
        let mut log = Vec::with_capacity(self.cfg.max_steps);
        while self.step < self.cfg.max_steps {
            let rec = self.train_step()?;
            if rec.step % 250 == 0 {
                log::debug!("{} step {}: L_pred {:.4} L_total {:.4}", self.cfg.label(), rec.step, rec.pred, rec.total);
            }
            log.push(rec);
            if let Some(dir) = checkpoint_dir {
                if self.cfg.checkpoint_every > 0 && self.step.is_multiple_of(self.cfg.checkpoint_every) {
                    self.save_checkpoint(&dir.join(format!("{}-step{}.ckpt", self.cfg.label(), self.step)))?;
                }
            }
        }
        Ok(log)
    }

    /// Training state including alignment parameters; not loadable as an
    /// inference bundle.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut c = Container::new();
        c.push_json(*b"TRHD", &serde_json::json!({ "step": self.step, "config": self.cfg }))?;
        c.push_params(*b"UNET", &self.unet)?;
        if let Some(s) = self.encoder.store() {
            c.push_params(*b"ENCT", s)?;
        }
        if let Some(a) = &self.align {
            c.push_params(*b"HEAD", &a.store)?;
        }
        c.save(path)
    }

    /// Strip everything alignment-related.
    pub fn into_bundle(self) -> (InferenceBundle, Option<(ProjectionHead, ParamStore<f32>)>) {
        let bundle = InferenceBundle {
            denoiser: self.denoiser,
            unet: self.unet,
            encoder: self.encoder,
            codec: self.codec.clone(),
            schedule: self.schedule,
            parameterization: self.cfg.parameterization,
            seed: self.cfg.seed,
        };
        (bundle, self.align.map(|a| (a.head, a.store)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub config: TrainConfig,
    pub seed: u64,
    pub train_digest: String,
    pub test_digest: String,
    pub codec_digest: String,
    pub losses: Vec<LossRecord>,
    pub evaluation: StabilityResult,
    /// Mean token cosine between φ(m) and teacher tokens on the test set.
    pub test_cosine: Option<f64>,
    pub inference_parameters: usize,
    pub final_parameter_digest: String,
    pub frozen_components_unchanged: bool,
    pub wall_clock_s: f64,
}

impl RunResult {
    pub fn mean_dice(&self) -> f64 {
        self.evaluation.mean_dice
    }

    pub fn mean_iou(&self) -> f64 {
        self.evaluation.mean_iou
    }

    pub fn std_dice(&self) -> f64 {
        self.evaluation.std_dice
    }

    /// Median total loss over `[from, to)` steps.
    pub fn median_total_loss(&self, from: usize, to: usize) -> Option<f64> {
        let mut v: Vec<f64> = self.losses.iter().filter(|r| r.step >= from && r.step < to).map(|r| r.total).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    }
}

pub struct RunOutput {
    pub result: RunResult,
    pub bundle: InferenceBundle,
}

/// Train one model and evaluate it on `test` under every seed in
/// `eval_seeds`.
pub fn run(
    cfg: &TrainConfig,
    codec: &Codec,
    train: &PreparedSet,
    test: &PreparedSet,
    eval_seeds: &[u64],
    checkpoint_dir: Option<&Path>,
) -> Result<RunOutput> {
    let started = Instant::now();
    let codec_digest = codec.digest();
    let mut trainer = Trainer::new(cfg, codec, train)?;
    let losses = trainer.train(checkpoint_dir)?;
    let (bundle, head) = trainer.into_bundle();
    let per_seed = bundle.evaluate_seeds(&test.samples, eval_seeds)?;
    let evaluation = StabilityResult::from_per_seed(eval_seeds, &per_seed)?;
    let test_cosine = match (&head, &test.teacher_tokens) {
        (Some((h, s)), Some(tokens)) => Some(feature_alignment(&bundle, h, s, &test.samples, tokens, bundle.seed)?),
        _ => None,
    };
    let mut digest = bundle.unet.digest();
    if let Some(s) = bundle.encoder.store() {
        digest.push(':');
        digest.push_str(&s.digest());
    }
    let result = RunResult {
        run_id: cfg.label(),
        config: cfg.clone(),
        seed: cfg.seed,
        train_digest: train.digest.clone(),
        test_digest: test.digest.clone(),
        codec_digest: codec_digest.clone(),
        losses,
        evaluation,
        test_cosine,
        inference_parameters: bundle.parameter_count(),
        final_parameter_digest: digest,
        frozen_components_unchanged: codec.digest() == codec_digest,
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    log::info!(
        "{}: Dice {:.4} ± {:.4}, IoU {:.4} ({:.0}s)",
        result.run_id,
        result.mean_dice(),
        result.std_dice(),
        result.mean_iou(),
        result.wall_clock_s
    );
    Ok(RunOutput { result, bundle })
}
