//! Single-step reverse inference from pure noise at `t = T`.

use std::path::Path;

use latseg_nn::{Graph, ParamStore, Tensor};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::codec::{adopt, stack_images, Codec, LearnableEncoder};
use crate::data::{Mask, SamplePair};
use crate::denoiser::{DenoiserConfig, DenoiserNet};
use crate::error::{Error, Result};
use crate::metrics::{dice_iou, mean_metrics, mean_std, SegmentationMetrics};
use crate::rng::{indexed_stream, stream, Stream};
use crate::schedule::{build_schedule, reconstruct, BetaScheduleConfig, NoiseSchedule, Parameterization};

const BUNDLE_HEADER: [u8; 4] = *b"BHDR";
const UNET: [u8; 4] = *b"UNET";
const LEARNED_ENCODER: [u8; 4] = *b"ENCT";
/// Sections a training checkpoint may carry that must never reach inference.
pub const ALIGNMENT_TAGS: [[u8; 4]; 2] = [*b"HEAD", *b"TCHR"];
pub const ALIGNMENT_PREFIXES: [&str; 2] = ["head.", "teacher."];

/// Images per U-Net call during evaluation.
const EVAL_CHUNK: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleHeader {
    pub format_version: u32,
    pub denoiser: DenoiserConfig,
    pub schedule: BetaScheduleConfig,
    pub parameterization: Parameterization,
    pub seed: u64,
}

/// Everything inference needs, and nothing from alignment.
#[derive(Clone, Debug)]
pub struct InferenceBundle {
    pub denoiser: DenoiserNet,
    pub unet: ParamStore<f32>,
    pub encoder: LearnableEncoder,
    pub codec: Codec,
    pub schedule: NoiseSchedule,
    pub parameterization: Parameterization,
    pub seed: u64,
}

fn reject_alignment_params(store: &ParamStore<f32>, what: &str) -> Result<()> {
    for (_, p) in store.iter() {
        if ALIGNMENT_PREFIXES.iter().any(|pre| p.name.starts_with(pre)) {
            return Err(Error::Contract(format!("{what} carries alignment parameter `{}`", p.name)));
        }
    }
    Ok(())
}

/// `z_T ~ N(0, I)` for image `index` under `seed`, independent of batching.
pub fn terminal_noise(seed: u64, index: u64, shape: &[usize]) -> Tensor<f32> {
    let mut rng = indexed_stream(seed, Stream::InferenceNoise, index);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
}

impl InferenceBundle {
    pub fn validate(&self) -> Result<()> {
        reject_alignment_params(&self.unet, "U-Net")?;
        if let Some(s) = self.encoder.store() {
            reject_alignment_params(s, "image encoder")?;
        }
        if !self.denoiser.is_duplicated() {
            return Err(Error::Contract("denoiser input layer was never duplicated for conditioning".into()));
        }
        Ok(())
    }

    /// Learned parameters inference touches: U-Net and E_θ (the frozen
    /// codec is shared by every model and reported separately).
    pub fn parameter_count(&self) -> usize {
        self.unet.numel() + self.encoder.numel()
    }

    pub fn latent_shape(&self, resolution: usize) -> [usize; 3] {
        let s = self.codec.latent_size(resolution);
        [self.codec.latent_channels(), s, s]
    }

    /// One U-Net evaluation per image: predict at `t = T` from the given
    /// `z^x` and `z_T`, reconstruct, decode and binarize.
    pub fn masks_from_latents(&self, zx: &Tensor<f32>, z_t: &Tensor<f32>) -> Result<Vec<Mask>> {
        let zhat = self.clean_latents(zx, z_t)?;
        self.codec.decode_masks(&zhat)
    }

    fn clean_latents(&self, zx: &Tensor<f32>, z_t: &Tensor<f32>) -> Result<Tensor<f32>> {
        let t_max = self.schedule.num_steps();
        let n = zx.shape()[0];
        let input = Tensor::concat_channels(&[zx, z_t])?;
        let pred = self.denoiser.predict(&self.unet, &input, &vec![t_max; n])?;
        reconstruct(&pred, z_t, t_max, self.parameterization, &self.schedule)
    }

    fn noise_batch(&self, seed: u64, indices: &[u64], resolution: usize) -> Result<Tensor<f32>> {
        let shape = self.latent_shape(resolution);
        let parts: Vec<Tensor<f32>> = indices.iter().map(|&i| terminal_noise(seed, i, &shape)).collect();
        Ok(Tensor::stack(&parts.iter().collect::<Vec<_>>())?)
    }

    /// Masks for `images[k]` treated as dataset index `indices[k]`.
    pub fn infer_batch(&self, images: &Tensor<f32>, indices: &[u64], seed: u64) -> Result<Vec<Mask>> {
        if images.shape().len() != 4 || images.shape()[0] != indices.len() {
            return Err(Error::Dimension(format!("{} indices for images {:?}", indices.len(), images.shape())));
        }
        let zx = self.encoder.encode(images)?;
        let z_t = self.noise_batch(seed, indices, images.shape()[2])?;
        self.masks_from_latents(&zx, &z_t)
    }

    pub fn infer(&self, image: &Tensor<f32>, index: u64) -> Result<Mask> {
        let batch = Tensor::stack(&[image])?;
        Ok(self.infer_batch(&batch, &[index], self.seed)?.remove(0))
    }

    /// Per-image metrics for every seed. `z^x` does not depend on the seed
    /// and is computed once per image.
    pub fn evaluate_seeds(&self, samples: &[SamplePair], seeds: &[u64]) -> Result<Vec<Vec<SegmentationMetrics>>> {
        if samples.is_empty() {
            return Err(Error::Validation("cannot evaluate on an empty dataset".into()));
        }
        let mut per_seed = vec![Vec::with_capacity(samples.len()); seeds.len()];
        for (c, chunk) in samples.chunks(EVAL_CHUNK).enumerate() {
            let refs: Vec<&SamplePair> = chunk.iter().collect();
            let zx = self.encoder.encode(&stack_images(&refs)?)?;
            let indices: Vec<u64> = (0..chunk.len()).map(|k| (c * EVAL_CHUNK + k) as u64).collect();
            for (si, &seed) in seeds.iter().enumerate() {
                let z_t = self.noise_batch(seed, &indices, chunk[0].resolution())?;
                for (m, s) in self.masks_from_latents(&zx, &z_t)?.iter().zip(chunk) {
                    per_seed[si].push(dice_iou(m, &s.mask)?);
                }
            }
        }
        Ok(per_seed)
    }

    pub fn evaluate(&self, samples: &[SamplePair], seed: u64) -> Result<SegmentationMetrics> {
        mean_metrics(&self.evaluate_seeds(samples, &[seed])?[0])
    }

    pub fn header(&self) -> BundleHeader {
        BundleHeader {
            format_version: 1,
            denoiser: self.denoiser.config().clone(),
            schedule: *self.schedule.config(),
            parameterization: self.parameterization,
            seed: self.seed,
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        self.validate()?;
        let mut c = self.codec.to_container()?;
        c.push_json(BUNDLE_HEADER, &self.header())?;
        c.push_params(UNET, &self.unet)?;
        if let Some(s) = self.encoder.store() {
            c.push_params(LEARNED_ENCODER, s)?;
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?, path)
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        for tag in c.tags() {
            if ALIGNMENT_TAGS.contains(&tag) {
                return Err(Error::Contract(format!(
                    "{} contains alignment section {}; inference bundles must not",
                    path.display(),
                    String::from_utf8_lossy(&tag)
                )));
            }
        }
        let header: BundleHeader = c.json(BUNDLE_HEADER, path)?;
        let codec = Codec::from_container(c, path)?;
        let unet_loaded = c.params(UNET, path)?;
        reject_alignment_params(&unet_loaded, "U-Net")?;
        let mut template = ParamStore::new();
        let mut rng = stream(0, Stream::DenoiserInit);
        let mut denoiser = DenoiserNet::new(&mut template, &header.denoiser, &mut rng)?;
        denoiser.duplicate_input_layer(&mut template)?;
        let unet = adopt(template, unet_loaded, path)?;
        let mut encoder = codec.learnable_encoder();
        let enc_store = match c.get(LEARNED_ENCODER) {
            Some(_) => c.params(LEARNED_ENCODER, path)?,
            None => ParamStore::new(),
        };
        reject_alignment_params(&enc_store, "image encoder")?;
        encoder.replace_store(enc_store, path)?;
        let bundle = InferenceBundle {
            denoiser,
            unet,
            encoder,
            codec,
            schedule: build_schedule(header.schedule)?,
            parameterization: header.parameterization,
            seed: header.seed,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityResult {
    pub seeds: Vec<u64>,
    pub per_seed_dice: Vec<f64>,
    pub per_seed_iou: Vec<f64>,
    pub mean_dice: f64,
    /// Sample standard deviation across seeds.
    pub std_dice: f64,
    pub mean_iou: f64,
}

impl StabilityResult {
    pub fn from_per_seed(seeds: &[u64], per_seed: &[Vec<SegmentationMetrics>]) -> Result<Self> {
        let means = per_seed.iter().map(|m| mean_metrics(m)).collect::<Result<Vec<_>>>()?;
        let dice: Vec<f64> = means.iter().map(|m| m.dice).collect();
        let iou: Vec<f64> = means.iter().map(|m| m.iou).collect();
        let (mean_dice, std_dice) = mean_std(&dice);
        Ok(StabilityResult {
            seeds: seeds.to_vec(),
            mean_iou: mean_std(&iou).0,
            per_seed_dice: dice,
            per_seed_iou: iou,
            mean_dice,
            std_dice,
        })
    }
}

/// Dataset-mean Dice under each seed, and its spread across seeds.
pub fn stability_eval(bundle: &InferenceBundle, samples: &[SamplePair], seeds: &[u64]) -> Result<StabilityResult> {
    if seeds.len() < 2 {
        return Err(Error::config("stability.seeds", "needs at least two seeds"));
    }
    let per_seed = bundle.evaluate_seeds(samples, seeds)?;
    StabilityResult::from_per_seed(seeds, &per_seed)
}

/// Mean token cosine between `φ(m)` and the teacher tokens, measured in the
/// inference setting (`t = T`, noise from `seed`).
pub fn feature_alignment(
    bundle: &InferenceBundle,
    head: &crate::alignment::ProjectionHead,
    head_store: &ParamStore<f32>,
    samples: &[SamplePair],
    teacher_tokens: &[Tensor<f32>],
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for (c, chunk) in samples.chunks(EVAL_CHUNK).enumerate() {
        let refs: Vec<&SamplePair> = chunk.iter().collect();
        let zx = bundle.encoder.encode(&stack_images(&refs)?)?;
        let indices: Vec<u64> = (0..chunk.len()).map(|k| (c * EVAL_CHUNK + k) as u64).collect();
        let z_t = bundle.noise_batch(seed, &indices, chunk[0].resolution())?;
        let mut g = Graph::new();
        let input = g.constant(Tensor::concat_channels(&[&zx, &z_t])?);
        let t_max = bundle.schedule.num_steps();
        let out = bundle.denoiser.forward(&mut g, &bundle.unet, input, &vec![t_max; chunk.len()], false)?;
        let tokens = teacher_tokens[c * EVAL_CHUNK].shape()[0];
        let p = head.project(&mut g, head_store, out.tap, tokens, false)?;
        let h = Tensor::concat_batch(
            &teacher_tokens[c * EVAL_CHUNK..c * EVAL_CHUNK + chunk.len()].iter().collect::<Vec<_>>(),
        )?;
        total += crate::alignment::mean_cosine(&h, g.value(p))? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_is_per_index_and_seed() {
        let a = terminal_noise(1, 3, &[4, 2, 2]);
        assert_eq!(a, terminal_noise(1, 3, &[4, 2, 2]));
        assert_ne!(a, terminal_noise(1, 4, &[4, 2, 2]));
        assert_ne!(a, terminal_noise(2, 3, &[4, 2, 2]));
    }

    #[test]
    fn identical_scores_have_zero_spread() {
        let m = SegmentationMetrics { dice: 0.8, iou: 0.8 / 1.2 };
        let r = StabilityResult::from_per_seed(&[0, 1, 2], &[vec![m], vec![m], vec![m]]).unwrap();
        assert_eq!(r.std_dice, 0.0);
        assert_eq!(r.mean_dice, 0.8);
    }
}
