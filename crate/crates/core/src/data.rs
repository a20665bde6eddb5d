//! Image/mask pairs: a procedural generator, PNG directory ingestion and
//! export, and the fixed 80/10/10 split.

use std::fs;
use std::path::Path;

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};
use latseg_nn::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{indexed_stream, Stream, StreamRng};

/// Ingested masks are binarized as `value > MASK_THRESHOLD` (out of 255).
pub const MASK_THRESHOLD: u8 = 127;
pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Validation("mask values must be 0 or 1".into()));
        }
        Ok(Mask { height, width, data })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// The mask as a 3-channel image in {−1, 1}, for the codec.
    pub fn to_image(&self) -> Tensor<f32> {
        let hw = self.height * self.width;
        Tensor::from_fn(&[3, self.height, self.width], |i| if self.data[i % hw] != 0 { 1.0 } else { -1.0 })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    /// `[3, H, W]` in [−1, 1].
    pub image: Tensor<f32>,
    pub mask: Mask,
}

impl SamplePair {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Mask) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || (s[1], s[2]) != mask.shape() {
            return Err(Error::Dimension(format!("image {:?} does not match mask {:?}", s, mask.shape())));
        }
        Ok(SamplePair { id: id.into(), image, mask })
    }

    pub fn resolution(&self) -> usize {
        self.mask.height
    }
}

pub struct Split {
    pub train: Vec<SamplePair>,
    pub val: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
}

/// 80/10/10 by position; val and test each get at least one sample when
/// `n ≥ 3`.
pub fn split(samples: Vec<SamplePair>) -> Split {
    let n = samples.len();
    let mut n_val = n / 10;
    let mut n_test = n / 10;
    if n >= 3 {
        n_val = n_val.max(1);
        n_test = n_test.max(1);
    }
    let n_train = n - n_val - n_test;
    let mut it = samples.into_iter();
    let train = it.by_ref().take(n_train).collect();
    let val = it.by_ref().take(n_val).collect();
    let test = it.collect();
    Split { train, val, test }
}

pub fn dataset_digest(samples: &[SamplePair]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.id.as_bytes());
        for v in s.image.data() {
            h.update(v.to_le_bytes());
        }
        h.update(&s.mask.data);
    }
    hex::encode(h.finalize())
}

// ---------------------------------------------------------------------------
// synthetic generator

/// Smoothly interpolated random lattice ("value noise"), two octaves,
/// roughly in [−1, 1].
fn value_noise(rng: &mut StreamRng, res: usize) -> Vec<f32> {
    let mut out = vec![0f32; res * res];
    for (cells, amp) in [(4usize, 0.65f32), (8, 0.35)] {
        let lattice: Vec<f32> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let at = |i: usize, j: usize| lattice[i * (cells + 1) + j];
        let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
        for r in 0..res {
            let fy = r as f32 / res as f32 * cells as f32;
            let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
            for c in 0..res {
                let fx = c as f32 / res as f32 * cells as f32;
                let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
                let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                out[r * res + c] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
    }
    out
}

fn draw_mask(rng: &mut StreamRng, res: usize) -> Vec<u8> {
    let r = res as f64;
    let blobs = rng.random_range(1..=3);
    let ellipses: Vec<[f64; 5]> = (0..blobs)
        .map(|_| {
            [
                rng.random_range(0.15 * r..0.85 * r),
                rng.random_range(0.15 * r..0.85 * r),
                rng.random_range(0.08 * r..0.3 * r),
                rng.random_range(0.08 * r..0.3 * r),
                rng.random_range(0.0..std::f64::consts::PI),
            ]
        })
        .collect();
    let mut mask = vec![0u8; res * res];
    for row in 0..res {
        for col in 0..res {
            let (y, x) = (row as f64 + 0.5, col as f64 + 0.5);
            let inside = ellipses.iter().any(|&[cy, cx, ay, ax, th]| {
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * th.cos() + dy * th.sin();
                let v = -dx * th.sin() + dy * th.cos();
                (u / ax).powi(2) + (v / ay).powi(2) <= 1.0
            });
            mask[row * res + col] = inside as u8;
        }
    }
    mask
}

/// One synthetic pair, a pure function of `(seed, index, resolution)`.
pub fn synth_sample(seed: u64, index: u64, resolution: usize) -> SamplePair {
    let res = resolution;
    let mut rng = indexed_stream(seed, Stream::Synthetic, index);
    let mask = loop {
        let m = draw_mask(&mut rng, res);
        let frac = m.iter().map(|&v| v as f64).sum::<f64>() / (res * res) as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            break m;
        }
    };
    let bg_level: f32 = rng.random_range(-0.7..-0.2);
    let contrast: f32 = rng.random_range(0.5..0.9);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.1..0.1));
    let fg_tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.1..0.1));
    let bg_tex = value_noise(&mut rng, res);
    let fg_tex = value_noise(&mut rng, res);
    let noise = Normal::new(0.0f32, 0.08).expect("valid std");
    let hw = res * res;
    let mut image = vec![0f32; 3 * hw];
    for ch in 0..3 {
        for i in 0..hw {
            let v = if mask[i] != 0 {
                bg_level + contrast + fg_tint[ch] + 0.15 * fg_tex[i]
            } else {
                bg_level + tint[ch] + 0.2 * bg_tex[i]
            };
            image[ch * hw + i] = (v + noise.sample(&mut rng)).clamp(-1.0, 1.0);
        }
    }
    SamplePair {
        id: format!("synth_{index:05}"),
        image: Tensor::from_vec(&[3, res, res], image).expect("shape matches"),
        mask: Mask { height: res, width: res, data: mask },
    }
}

pub fn synth_dataset(n: usize, seed: u64, resolution: usize) -> Result<Vec<SamplePair>> {
    if n == 0 {
        return Err(Error::config("synthetic.count", "must be at least 1"));
    }
    if resolution < 8 {
        return Err(Error::config("resolution", "must be at least 8"));
    }
    Ok((0..n as u64).map(|i| synth_sample(seed, i, resolution)).collect())
}

// ---------------------------------------------------------------------------
// directory layout: <root>/images/<id>.png, <root>/masks/<id>.png

pub fn png_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory(&bytes).map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })
}

/// RGB image resized to `resolution` and normalized to [-1, 1]; grayscale
/// inputs are replicated across channels.
pub fn load_image(path: &Path, resolution: usize) -> Result<Tensor<f32>> {
    let res = resolution as u32;
    let rgb = open_image(path)?.to_rgb8();
    let rgb = image::imageops::resize(&rgb, res, res, FilterType::Triangle);
    let hw = resolution * resolution;
    let mut pixels = vec![0f32; 3 * hw];
    for (i, p) in rgb.pixels().enumerate() {
        for ch in 0..3 {
            pixels[ch * hw + i] = p.0[ch] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(&[3, resolution, resolution], pixels)?)
}

/// Mask resized to `resolution` and thresholded at 127.
pub fn load_mask(path: &Path, resolution: usize) -> Result<Mask> {
    let res = resolution as u32;
    let gray = open_image(path)?.to_luma8();
    let gray = image::imageops::resize(&gray, res, res, FilterType::Triangle);
    let data = gray.pixels().map(|p| (p.0[0] > MASK_THRESHOLD) as u8).collect();
    Ok(Mask { height: resolution, width: resolution, data })
}

/// Pixel dimensions `(width, height)` of an image file.
pub fn image_dimensions(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn load_directory(root: &Path, resolution: usize) -> Result<Vec<SamplePair>> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    if !images_dir.is_dir() {
        return Err(Error::Validation(format!("{} has no images/ directory", root.display())));
    }
    let images = png_files(&images_dir)?;
    if images.is_empty() {
        return Err(Error::Validation(format!("no PNG images under {}", images_dir.display())));
    }
    let mut out = Vec::with_capacity(images.len());
    for img_path in images {
        let name = img_path.file_name().expect("listed file has a name");
        let mask_path = masks_dir.join(name);
        if !mask_path.is_file() {
            return Err(Error::Listing(format!("no mask for image {}", img_path.display())));
        }
        let id = img_path.file_stem().expect("listed file has a stem").to_string_lossy().into_owned();
        let image = load_image(&img_path, resolution)?;
        let mask = load_mask(&mask_path, resolution)?;
        out.push(SamplePair { id, image, mask });
    }
    Ok(out)
}

pub fn image_to_rgb8(image: &Tensor<f32>) -> RgbImage {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let hw = h * w;
    let d = image.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|ch| ((d[ch * hw + i] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8))
    })
}

pub fn mask_to_gray(mask: &Mask) -> GrayImage {
    GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        image::Luma([mask.data[y as usize * mask.width + x as usize] * 255])
    })
}

/// Write pairs in the layout `load_directory` reads.
pub fn export_directory(samples: &[SamplePair], root: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for s in samples {
        let name = format!("{}.png", s.id);
        let p = root.join("images").join(&name);
        image_to_rgb8(&s.image).save(&p)?;
        let p = root.join("masks").join(&name);
        mask_to_gray(&s.mask).save(&p)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic_and_respects_foreground_bounds() {
        let a = synth_dataset(12, 3, 32).unwrap();
        let b = synth_dataset(12, 3, 32).unwrap();
        assert_eq!(dataset_digest(&a), dataset_digest(&b));
        assert_ne!(dataset_digest(&a), dataset_digest(&synth_dataset(12, 4, 32).unwrap()));
        for s in &a {
            let f = s.mask.foreground_fraction();
            assert!((MIN_FOREGROUND..=MAX_FOREGROUND).contains(&f), "{f}");
            assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn foreground_is_brighter_than_background() {
        let s = synth_sample(1, 0, 64);
        let hw = 64 * 64;
        let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0, 0.0, 0);
        for i in 0..hw {
            let v: f32 = (0..3).map(|c| s.image.data()[c * hw + i]).sum();
            if s.mask.data()[i] != 0 {
                fg += v;
                nf += 1;
            } else {
                bg += v;
                nb += 1;
            }
        }
        assert!(fg / nf as f32 > bg / nb as f32 + 1.0);
    }

    #[test]
    fn split_is_80_10_10() {
        let s = split(synth_dataset(20, 0, 8).unwrap());
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (16, 2, 2));
        let s = split(synth_dataset(3, 0, 8).unwrap());
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1, 1, 1));
    }

    #[test]
    fn zero_count_is_config_error() {
        assert!(synth_dataset(0, 0, 32).unwrap_err().is_config());
    }
}
