//! Frozen image/mask autoencoder (E, D) and the learnable encoder clone.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use latseg_nn::{AdamW, AdamWConfig, Conv2d, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::data::{Mask, SamplePair};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    ToyAe,
    PixelSpace,
}

impl fmt::Display for CodecKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CodecKind::ToyAe => "toy_ae",
            CodecKind::PixelSpace => "pixel_space",
        })
    }
}

impl FromStr for CodecKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy_ae" => Ok(CodecKind::ToyAe),
            "pixel_space" => Ok(CodecKind::PixelSpace),
            other => Err(Error::config("codec", format!("unknown codec `{other}` (expected toy_ae or pixel_space)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub kind: CodecKind,
    /// Pixels per latent cell along each axis; a power of two.
    pub downsample: usize,
    /// Ignored by `pixel_space`, which always has 3.
    pub latent_channels: usize,
    pub base_channels: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Decoded masks are foreground where the channel mean exceeds this.
    pub threshold: f32,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            kind: CodecKind::ToyAe,
            downsample: 4,
            latent_channels: 4,
            base_channels: 16,
            train_steps: 600,
            batch_size: 8,
            lr: 2e-3,
            threshold: 0.0,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.downsample.is_power_of_two() {
            return Err(Error::config("codec.downsample", "must be a power of two"));
        }
        if self.kind == CodecKind::ToyAe {
            if self.downsample < 2 {
                return Err(Error::config("codec.downsample", "toy_ae needs at least 2"));
            }
            if self.latent_channels == 0 || self.base_channels == 0 {
                return Err(Error::config("codec.latent_channels", "channel counts must be positive"));
            }
            if self.batch_size == 0 {
                return Err(Error::config("codec.batch_size", "must be positive"));
            }
            if !(self.lr > 0.0 && self.lr.is_finite()) {
                return Err(Error::config("codec.lr", "must be positive and finite"));
            }
        }
        if !(-1.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("codec.threshold", "must lie in [-1, 1]"));
        }
        Ok(())
    }

    pub fn latent_channels(&self) -> usize {
        match self.kind {
            CodecKind::ToyAe => self.latent_channels,
            CodecKind::PixelSpace => 3,
        }
    }
}

/// Encoder layer layout; the parameters live in a separate store so the
/// same layout drives both E and its learnable clone.
#[derive(Clone, Debug)]
pub struct EncoderNet {
    conv_in: Conv2d,
    down: Vec<Conv2d>,
    conv_out: Conv2d,
}

impl EncoderNet {
    fn new(store: &mut ParamStore<f32>, cfg: &CodecConfig, rng: &mut impl rand::Rng) -> Self {
        let b = cfg.base_channels;
        let conv_in = Conv2d::new(store, "enc.conv_in", 3, b, 3, 1, rng);
        let stages = cfg.downsample.trailing_zeros() as usize;
        let mut ch = b;
        let down = (0..stages)
            .map(|i| {
                let c = Conv2d::new(store, &format!("enc.down{i}"), ch, 2 * b, 3, 2, rng);
                ch = 2 * b;
                c
            })
            .collect();
        let conv_out = Conv2d::new(store, "enc.conv_out", ch, cfg.latent_channels, 1, 1, rng);
        EncoderNet { conv_in, down, conv_out }
    }

    /// Unscaled latent.
    fn forward(&self, g: &mut Graph<f32>, store: &ParamStore<f32>, x: Var, trainable: bool) -> Result<Var> {
        let mut h = self.conv_in.forward(g, store, x, trainable)?;
        h = g.silu(h);
        for c in &self.down {
            h = c.forward(g, store, h, trainable)?;
            h = g.silu(h);
        }
        Ok(self.conv_out.forward(g, store, h, trainable)?)
    }
}

#[derive(Clone, Debug)]
struct DecoderNet {
    conv_in: Conv2d,
    up: Vec<Conv2d>,
    conv_out: Conv2d,
}

impl DecoderNet {
    fn new(store: &mut ParamStore<f32>, cfg: &CodecConfig, rng: &mut impl rand::Rng) -> Self {
        let b = cfg.base_channels;
        let conv_in = Conv2d::new(store, "dec.conv_in", cfg.latent_channels, 2 * b, 3, 1, rng);
        let stages = cfg.downsample.trailing_zeros() as usize;
        let up = (0..stages)
            .map(|i| {
                let out = if i + 1 == stages { b } else { 2 * b };
                Conv2d::new(store, &format!("dec.up{i}"), 2 * b, out, 3, 1, rng)
            })
            .collect();
        let conv_out = Conv2d::new(store, "dec.conv_out", b, 3, 3, 1, rng);
        DecoderNet { conv_in, up, conv_out }
    }

    fn forward(&self, g: &mut Graph<f32>, store: &ParamStore<f32>, z: Var, trainable: bool) -> Result<Var> {
        let mut h = self.conv_in.forward(g, store, z, trainable)?;
        h = g.silu(h);
        for c in &self.up {
            h = g.upsample2x(h)?;
            h = c.forward(g, store, h, trainable)?;
            h = g.silu(h);
        }
        let out = self.conv_out.forward(g, store, h, trainable)?;
        Ok(g.tanh(out))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecHeader {
    pub format_version: u32,
    pub config: CodecConfig,
    pub resolution: usize,
    /// Multiplier applied to raw encoder output so mask latents have unit
    /// standard deviation.
    pub latent_scale: f32,
    /// Mask reconstruction PSNR (dB) measured after codec training.
    /// `None` for codecs that were not trained.
    pub psnr: Option<f64>,
    /// Reconstructions of in-distribution masks should stay above this.
    pub psnr_floor: Option<f64>,
    pub train_mask_dice: f64,
}

pub const PSNR_MARGIN_DB: f64 = 3.0;
const HEADER: [u8; 4] = *b"CHDR";
const ENCODER: [u8; 4] = *b"CENC";
const DECODER: [u8; 4] = *b"CDEC";

/// The frozen pair (E, D).
#[derive(Clone, Debug)]
pub struct Codec {
    header: CodecHeader,
    encoder: Option<(EncoderNet, ParamStore<f32>)>,
    decoder: Option<(DecoderNet, ParamStore<f32>)>,
}

fn check_images(x: &Tensor<f32>) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("expected [N, 3, H, W] images, got {s:?}")));
    }
    if s[1] != 3 {
        return Err(Error::Validation(format!("images must have 3 channels, got {}", s[1])));
    }
    Ok(())
}

pub fn avg_pool(x: &Tensor<f32>, k: usize) -> Result<Tensor<f32>> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % k != 0 || w % k != 0 {
        return Err(Error::Dimension(format!("{h}x{w} is not divisible by {k}")));
    }
    let (ho, wo) = (h / k, w / k);
    let d = x.data();
    let inv = 1.0 / (k * k) as f32;
    Ok(Tensor::from_fn(&[n, c, ho, wo], |i| {
        let (plane, r) = (i / (ho * wo), i % (ho * wo));
        let (y, xo) = (r / wo, r % wo);
        let base = plane * h * w;
        let mut acc = 0f32;
        for dy in 0..k {
            for dx in 0..k {
                acc += d[base + (y * k + dy) * w + xo * k + dx];
            }
        }
        acc * inv
    }))
}

pub fn upsample_nearest(x: &Tensor<f32>, k: usize) -> Tensor<f32> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h * k, w * k);
    let d = x.data();
    Tensor::from_fn(&[n, c, ho, wo], |i| {
        let (plane, r) = (i / (ho * wo), i % (ho * wo));
        d[plane * h * w + (r / wo / k) * w + (r % wo) / k]
    })
}

/// Channel mean then `> threshold`; accepts `[3, H, W]` or `[N, 3, H, W]`.
pub fn binarize(decoded: &Tensor<f32>, threshold: f32) -> Result<Vec<Mask>> {
    let s = decoded.shape();
    let (n, c, h, w) = match *s {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::Dimension(format!("cannot binarize tensor of shape {s:?}"))),
    };
    let hw = h * w;
    let d = decoded.data();
    (0..n)
        .map(|b| {
            let bits = (0..hw)
                .map(|i| {
                    let mean = (0..c).map(|ch| d[(b * c + ch) * hw + i]).sum::<f32>() / c as f32;
                    (mean > threshold) as u8
                })
                .collect();
            Mask::new(h, w, bits)
        })
        .collect()
}

pub fn masks_to_images(masks: &[&Mask]) -> Result<Tensor<f32>> {
    let imgs: Vec<Tensor<f32>> = masks.iter().map(|m| m.to_image()).collect();
    Ok(Tensor::stack(&imgs.iter().collect::<Vec<_>>())?)
}

pub fn stack_images(samples: &[&SamplePair]) -> Result<Tensor<f32>> {
    Ok(Tensor::stack(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())?)
}

/// Peak signal-to-noise ratio for signals in [−1, 1] (peak-to-peak 2).
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    a.expect_same_shape(b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.numel() as f64;
    Ok(10.0 * (4.0 / mse.max(1e-20)).log10())
}

impl Codec {
    /// Parameter-free codec: average-pool encode, nearest-neighbour decode.
    /// With `downsample = 1` both maps are the identity.
    pub fn pixel_space(mut config: CodecConfig, resolution: usize) -> Result<Self> {
        config.kind = CodecKind::PixelSpace;
        config.latent_channels = 3;
        config.validate()?;
        Ok(Codec {
            header: CodecHeader {
                format_version: 1,
                config,
                resolution,
                latent_scale: 1.0,
                psnr: None,
                psnr_floor: None,
                train_mask_dice: 1.0,
            },
            encoder: None,
            decoder: None,
        })
    }

    /// Fit the toy autoencoder on an equal mix of images and masks, then
    /// freeze it and record its reconstruction quality.
    pub fn train(config: &CodecConfig, samples: &[SamplePair], seed: u64) -> Result<Self> {
        config.validate()?;
        if config.kind == CodecKind::PixelSpace {
            let res = samples.first().map(|s| s.resolution()).unwrap_or(0);
            return Self::pixel_space(config.clone(), res);
        }
        if samples.is_empty() {
            return Err(Error::Validation("codec training needs at least one sample".into()));
        }
        let resolution = samples[0].resolution();
        if !resolution.is_multiple_of(config.downsample) {
            return Err(Error::config("codec.downsample", format!("does not divide resolution {resolution}")));
        }
        let mut init = stream(seed, Stream::CodecInit);
        let mut enc_store = ParamStore::new();
        let enc = EncoderNet::new(&mut enc_store, config, &mut init);
        let mut dec_store = ParamStore::new();
        let dec = DecoderNet::new(&mut dec_store, config, &mut init);
        let opt_cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut enc_opt = AdamW::new(&enc_store, opt_cfg);
        let mut dec_opt = AdamW::new(&dec_store, opt_cfg);

        let mut batches = stream(seed, Stream::CodecBatches);
        let mut order: Vec<usize> = Vec::new();
        let half = config.batch_size.div_ceil(2);
        for step in 0..config.train_steps {
            let mut pick = Vec::with_capacity(half);
            while pick.len() < half {
                if order.is_empty() {
                    order = (0..samples.len()).collect();
                    order.shuffle(&mut batches);
                }
                pick.push(order.pop().expect("refilled"));
            }
            let picked: Vec<&SamplePair> = pick.iter().map(|&i| &samples[i]).collect();
            let imgs = stack_images(&picked)?;
            let masks = masks_to_images(&picked.iter().map(|s| &s.mask).collect::<Vec<_>>())?;
            let x = Tensor::concat_batch(&[&imgs, &masks])?;
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let z = enc.forward(&mut g, &enc_store, xv, true)?;
            let y = dec.forward(&mut g, &dec_store, z, true)?;
            let loss = g.mean_squared_diff(y, x)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFinite { step, diagnostics: "codec reconstruction loss".into() });
            }
            let grads = g.backward(loss)?;
            // Cosine decay keeps the final weights from jittering.
            let lr = config.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / config.train_steps as f64).cos());
            let (ge, gd) = (grads.for_store(&enc_store), grads.for_store(&dec_store));
            enc_opt.step(&mut enc_store, &ge, lr)?;
            dec_opt.step(&mut dec_store, &gd, lr)?;
            if step % 200 == 0 {
                log::debug!("codec step {step}: loss {lv:.5}");
            }
        }

        let mut codec = Codec {
            header: CodecHeader {
                format_version: 1,
                config: config.clone(),
                resolution,
                latent_scale: 1.0,
                psnr: None,
                psnr_floor: None,
                train_mask_dice: 0.0,
            },
            encoder: Some((enc, enc_store)),
            decoder: Some((dec, dec_store)),
        };
        // Scale so that mask latents have unit standard deviation.
        let (mut sum, mut sq, mut count) = (0f64, 0f64, 0usize);
        let mut dice = Vec::new();
        let mut psnrs = Vec::new();
        for chunk in samples.chunks(16) {
            let masks = masks_to_images(&chunk.iter().map(|s| &s.mask).collect::<Vec<_>>())?;
            let z = codec.encode(&masks)?;
            for &v in z.data() {
                sum += v as f64;
                sq += (v as f64).powi(2);
                count += 1;
            }
            let rec = codec.decode(&z)?;
            psnrs.push(psnr(&rec, &masks)?);
            for (m, s) in binarize(&rec, config.threshold)?.iter().zip(chunk) {
                dice.push(crate::metrics::dice_iou(m, &s.mask)?.dice);
            }
        }
        let mean = sum / count as f64;
        let std = (sq / count as f64 - mean * mean).max(1e-12).sqrt();
        codec.header.latent_scale = (1.0 / std) as f32;
        let mean_psnr = psnrs.iter().sum::<f64>() / psnrs.len() as f64;
        codec.header.psnr = Some(mean_psnr);
        codec.header.psnr_floor = Some(mean_psnr - PSNR_MARGIN_DB);
        codec.header.train_mask_dice = dice.iter().sum::<f64>() / dice.len() as f64;
        log::info!(
            "codec trained: mask PSNR {:.2} dB, mask round-trip Dice {:.4}, latent scale {:.4}",
            mean_psnr,
            codec.header.train_mask_dice,
            codec.header.latent_scale
        );
        Ok(codec)
    }

    pub fn header(&self) -> &CodecHeader {
        &self.header
    }

    pub fn config(&self) -> &CodecConfig {
        &self.header.config
    }

    pub fn kind(&self) -> CodecKind {
        self.header.config.kind
    }

    pub fn downsample(&self) -> usize {
        self.header.config.downsample
    }

    pub fn latent_channels(&self) -> usize {
        self.header.config.latent_channels()
    }

    pub fn latent_scale(&self) -> f32 {
        self.header.latent_scale
    }

    pub fn latent_size(&self, resolution: usize) -> usize {
        resolution / self.downsample()
    }

    /// Digest over the frozen E and D parameters.
    pub fn digest(&self) -> String {
        let e = self.encoder.as_ref().map(|(_, s)| s.digest()).unwrap_or_default();
        let d = self.decoder.as_ref().map(|(_, s)| s.digest()).unwrap_or_default();
        format!("{e}:{d}")
    }

    pub fn encoder_store(&self) -> Option<&ParamStore<f32>> {
        self.encoder.as_ref().map(|(_, s)| s)
    }

    /// `E(x)`, frozen, for a batch `[N, 3, H, W]`.
    pub fn encode(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        check_images(images)?;
        match &self.encoder {
            None => avg_pool(images, self.downsample()),
            Some((net, store)) => {
                let mut g = Graph::new();
                let x = g.constant(images.clone());
                let z = net.forward(&mut g, store, x, false)?;
                let z = g.scale(z, self.latent_scale());
                Ok(g.value(z).clone())
            }
        }
    }

    pub fn encode_mask(&self, masks: &[&Mask]) -> Result<Tensor<f32>> {
        self.encode(&masks_to_images(masks)?)
    }

    /// `D(z)` for a batch `[N, C_lat, h, w]`.
    pub fn decode(&self, latents: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = latents.shape();
        if s.len() != 4 || s[1] != self.latent_channels() {
            return Err(Error::Dimension(format!("expected [N, {}, h, w] latents, got {s:?}", self.latent_channels())));
        }
        match &self.decoder {
            None => Ok(upsample_nearest(latents, self.downsample())),
            Some((net, store)) => {
                let mut g = Graph::new();
                let z = g.constant(latents.map(|v| v / self.latent_scale()));
                let y = net.forward(&mut g, store, z, false)?;
                Ok(g.value(y).clone())
            }
        }
    }

    pub fn decode_masks(&self, latents: &Tensor<f32>) -> Result<Vec<Mask>> {
        binarize(&self.decode(latents)?, self.config().threshold)
    }

    pub fn learnable_encoder(&self) -> LearnableEncoder {
        LearnableEncoder {
            net: self.encoder.as_ref().map(|(n, s)| (n.clone(), s.clone())),
            downsample: self.downsample(),
            latent_scale: self.latent_scale(),
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.push_json(HEADER, &self.header)?;
        if let (Some((_, e)), Some((_, d))) = (&self.encoder, &self.decoder) {
            c.push_params(ENCODER, e)?;
            c.push_params(DECODER, d)?;
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
        let header: CodecHeader = c.json(HEADER, path)?;
        let cfg = &header.config;
        if cfg.kind == CodecKind::PixelSpace {
            return Ok(Codec { header, encoder: None, decoder: None });
        }
        // Rebuild the layouts, then swap in the stored values.
        let mut rng = stream(0, Stream::CodecInit);
        let mut enc_store = ParamStore::new();
        let enc = EncoderNet::new(&mut enc_store, cfg, &mut rng);
        let mut dec_store = ParamStore::new();
        let dec = DecoderNet::new(&mut dec_store, cfg, &mut rng);
        let enc_store = adopt(enc_store, c.params(ENCODER, path)?, path)?;
        let dec_store = adopt(dec_store, c.params(DECODER, path)?, path)?;
        Ok(Codec { header, encoder: Some((enc, enc_store)), decoder: Some((dec, dec_store)) })
    }
}

/// Verify `loaded` has exactly the layout of `template` and return it.
pub(crate) fn adopt(template: ParamStore<f32>, loaded: ParamStore<f32>, path: &Path) -> Result<ParamStore<f32>> {
    let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    if template.len() != loaded.len() {
        return Err(bad(format!("expected {} parameters, found {}", template.len(), loaded.len())));
    }
    for ((_, a), (_, b)) in template.iter().zip(loaded.iter()) {
        if a.name != b.name || a.value.shape() != b.value.shape() {
            return Err(bad(format!(
                "parameter `{}` {:?} does not match `{}` {:?}",
                b.name,
                b.value.shape(),
                a.name,
                a.value.shape()
            )));
        }
    }
    Ok(loaded)
}

/// `E_θ`: the encoder layout with independently owned parameters,
/// initialised as an exact copy of E.
#[derive(Clone, Debug)]
pub struct LearnableEncoder {
    net: Option<(EncoderNet, ParamStore<f32>)>,
    downsample: usize,
    latent_scale: f32,
}

impl LearnableEncoder {
    pub fn store(&self) -> Option<&ParamStore<f32>> {
        self.net.as_ref().map(|(_, s)| s)
    }

    pub fn store_mut(&mut self) -> Option<&mut ParamStore<f32>> {
        self.net.as_mut().map(|(_, s)| s)
    }

    pub fn numel(&self) -> usize {
        self.store().map_or(0, |s| s.numel())
    }

    /// Differentiable encode of a constant image batch.
    pub fn forward(&self, g: &mut Graph<f32>, images: &Tensor<f32>, trainable: bool) -> Result<Var> {
        check_images(images)?;
        match &self.net {
            None => Ok(g.constant(avg_pool(images, self.downsample)?)),
            Some((net, store)) => {
                let x = g.constant(images.clone());
                let z = net.forward(g, store, x, trainable)?;
                Ok(g.scale(z, self.latent_scale))
            }
        }
    }

    pub fn encode(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let z = self.forward(&mut g, images, false)?;
        Ok(g.value(z).clone())
    }

    pub(crate) fn replace_store(&mut self, store: ParamStore<f32>, path: &Path) -> Result<()> {
        match &mut self.net {
            Some((_, s)) => {
                let template = std::mem::take(s);
                *s = adopt(template, store, path)?;
                Ok(())
            }
            None if store.is_empty() => Ok(()),
            None => {
                Err(Error::Format { path: path.to_path_buf(), reason: "pixel-space encoder has no parameters".into() })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    #[test]
    fn binarize_threshold_cases() {
        let neg = Tensor::full(&[3, 2, 2], -1.0f32);
        assert!(binarize(&neg, 0.0).unwrap()[0].data().iter().all(|&v| v == 0));
        let pos = Tensor::full(&[3, 2, 2], 1.0f32);
        assert!(binarize(&pos, 0.0).unwrap()[0].data().iter().all(|&v| v == 1));
        let mixed = Tensor::from_vec(&[3, 1, 2], vec![-0.2, 0.3, -0.2, 0.3, -0.2, 0.3]).unwrap();
        assert_eq!(binarize(&mixed, 0.0).unwrap()[0].data(), &[0, 1]);
    }

    #[test]
    fn pixel_space_round_trips_masks_exactly() {
        let data = synth_dataset(3, 1, 32).unwrap();
        let codec = Codec::pixel_space(CodecConfig { downsample: 1, ..CodecConfig::default() }, 32).unwrap();
        let z = codec.encode_mask(&data.iter().map(|s| &s.mask).collect::<Vec<_>>()).unwrap();
        let back = codec.decode_masks(&z).unwrap();
        for (m, s) in back.iter().zip(&data) {
            assert_eq!(m, &s.mask);
        }
    }

    #[test]
    fn toy_codec_shapes_clone_and_persistence() {
        let data = synth_dataset(4, 2, 32).unwrap();
        let cfg = CodecConfig { downsample: 8, train_steps: 2, ..CodecConfig::default() };
        let codec = Codec::train(&cfg, &data, 0).unwrap();
        let x = stack_images(&data.iter().collect::<Vec<_>>()).unwrap();
        let z = codec.encode(&x).unwrap();
        assert_eq!(z.shape(), &[4, 4, 4, 4]);
        assert_eq!(codec.decode(&z).unwrap().shape(), &[4, 3, 32, 32]);
        let enc = codec.learnable_encoder();
        assert_eq!(enc.store().unwrap().max_abs_diff(codec.encoder_store().unwrap()).unwrap(), 0.0);
        let ze = enc.encode(&x).unwrap();
        assert_eq!(ze.data(), z.data());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("codec.bin");
        codec.save(&p).unwrap();
        let back = Codec::load(&p).unwrap();
        assert_eq!(back.digest(), codec.digest());
        assert_eq!(back.header(), codec.header());
        assert_eq!(back.encode(&x).unwrap().data(), z.data());
    }

    #[test]
    fn wrong_channel_count_is_validation_error() {
        let codec = Codec::pixel_space(CodecConfig::default(), 32).unwrap();
        let x = Tensor::zeros(&[1, 1, 8, 8]);
        assert!(matches!(codec.learnable_encoder().encode(&x), Err(Error::Validation(_))));
    }
}
