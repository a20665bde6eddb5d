//! Teacher tokens, the projection head φ, and the cosine distillation loss.
//!
//! Nothing here is needed at inference: the trainer builds it on demand and
//! the inference bundle refuses to carry it.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt};
use latseg_nn::{gemm, normal_tensor, row_cosines, Graph, Linear, MatRef, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Guard for zero-norm rows in cosine denominators.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    FrozenRandom,
    /// Token files `<dir>/<sample id>.tokens`.
    External(PathBuf),
}

impl fmt::Display for TeacherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TeacherKind::FrozenRandom => f.write_str("frozen_random"),
            TeacherKind::External(p) => write!(f, "external:{}", p.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub enabled: bool,
    pub lambda: f64,
    pub teacher: TeacherKind,
    pub teacher_patch: usize,
    pub teacher_dim: usize,
    pub teacher_depth: usize,
    pub teacher_heads: usize,
    pub head_hidden: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            enabled: false,
            lambda: 0.5,
            teacher: TeacherKind::FrozenRandom,
            teacher_patch: 16,
            teacher_dim: 64,
            teacher_depth: 2,
            teacher_heads: 4,
            head_hidden: 128,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("alignment.lambda", format!("must be a finite value >= 0, got {}", self.lambda)));
        }
        if self.teacher_patch == 0 {
            return Err(Error::config("alignment.teacher_patch", "must be positive"));
        }
        if self.teacher_dim == 0 || self.teacher_heads == 0 || !self.teacher_dim.is_multiple_of(self.teacher_heads) {
            return Err(Error::config("alignment.teacher_dim", "must be a positive multiple of teacher_heads"));
        }
        if self.head_hidden == 0 {
            return Err(Error::config("alignment.head_hidden", "must be positive"));
        }
        Ok(())
    }
}

/// `L_pred + λ·L_distill`.
pub fn total_loss(l_pred: f64, l_distill: f64, lambda: f64) -> Result<f64> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::config("alignment.lambda", format!("must be >= 0, got {lambda}")));
    }
    Ok(l_pred + lambda * l_distill)
}

/// Negative mean per-row cosine similarity of two `[L, D]` matrices.
pub fn distill_loss<T: Scalar>(h: &Tensor<T>, p: &Tensor<T>) -> Result<T> {
    if h.shape() != p.shape() || h.rank() != 2 {
        return Err(Error::Dimension(format!(
            "token matrices {:?} and {:?} must match and be [L, D]",
            h.shape(),
            p.shape()
        )));
    }
    let cos = row_cosines(p.data(), h.data(), h.shape()[1], T::from_f64_lossy(COSINE_EPS));
    let n = T::from_usize(cos.len()).expect("count fits");
    Ok(-cos.into_iter().fold(T::zero(), |a, b| a + b) / n)
}

/// Mean per-row cosine similarity.
pub fn mean_cosine(h: &Tensor<f32>, p: &Tensor<f32>) -> Result<f64> {
    Ok(-(distill_loss(h, p)? as f64))
}

// ---------------------------------------------------------------------------
// teacher

pub trait TeacherProvider: Send + Sync {
    /// `[L, D]` tokens for one clean `[3, H, W]` image.
    fn tokens(&self, image: &Tensor<f32>, id: &str) -> Result<Tensor<f32>>;
    fn embed_dim(&self) -> usize;
    /// Stable identifier of the teacher's parameters.
    fn digest(&self) -> String;
}

fn matmul(a: &[f32], rows: usize, k: usize, b: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0f32; rows * cols];
    gemm(MatRef::row_major(a, rows, k), MatRef::row_major(b, k, cols), 0.0, &mut out);
    out
}

/// `x [n, i] · Wᵀ` for `W [o, i]`, plus bias.
fn dense(x: &[f32], n: usize, w: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f32> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0f32; n * o];
    gemm(MatRef::row_major(x, n, i), MatRef::transposed(w.data(), i, o), 0.0, &mut out);
    for row in out.chunks_mut(o) {
        row.iter_mut().zip(b.data()).for_each(|(v, &bb)| *v += bb);
    }
    out
}

fn layer_norm(x: &[f32], dim: usize) -> Vec<f32> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(dim) {
        let mean = row.iter().sum::<f32>() / dim as f32;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / dim as f32;
        let r = 1.0 / (var + 1e-6).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * r);
    }
    out
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (0.797_884_6 * (x + 0.044_715 * x * x * x)).tanh())
}

struct TeacherBlock {
    qkv_w: Tensor<f32>,
    qkv_b: Tensor<f32>,
    proj_w: Tensor<f32>,
    proj_b: Tensor<f32>,
    fc1_w: Tensor<f32>,
    fc1_b: Tensor<f32>,
    fc2_w: Tensor<f32>,
    fc2_b: Tensor<f32>,
}

/// A frozen, seed-determined patch transformer: patch embedding plus
/// position embedding, then pre-norm attention/MLP blocks. The raw
/// final-block tokens are returned (no final normalization).
pub struct RandomPatchTeacher {
    patch: usize,
    dim: usize,
    heads: usize,
    tokens: usize,
    patch_w: Tensor<f32>,
    patch_b: Tensor<f32>,
    pos: Tensor<f32>,
    blocks: Vec<TeacherBlock>,
    digest: String,
}

impl RandomPatchTeacher {
    pub fn new<R: Rng + ?Sized>(cfg: &AlignmentConfig, resolution: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if !resolution.is_multiple_of(cfg.teacher_patch) {
            return Err(Error::config(
                "alignment.teacher_patch",
                format!("{} does not divide the image resolution {resolution}", cfg.teacher_patch),
            ));
        }
        let (p, d) = (cfg.teacher_patch, cfg.teacher_dim);
        let side = resolution / p;
        let std = 0.02;
        let zeros = |n: usize| Tensor::zeros(&[n]);
        let patch_w = normal_tensor(&[d, 3 * p * p], std, rng);
        let pos = normal_tensor(&[side * side, d], std, rng);
        let blocks = (0..cfg.teacher_depth)
            .map(|_| TeacherBlock {
                qkv_w: normal_tensor(&[3 * d, d], std, rng),
                qkv_b: zeros(3 * d),
                proj_w: normal_tensor(&[d, d], std, rng),
                proj_b: zeros(d),
                fc1_w: normal_tensor(&[4 * d, d], std, rng),
                fc1_b: zeros(4 * d),
                fc2_w: normal_tensor(&[d, 4 * d], std, rng),
                fc2_b: zeros(d),
            })
            .collect::<Vec<_>>();
        let mut h = Sha256::new();
        let mut feed = |t: &Tensor<f32>| t.data().iter().for_each(|v| h.update(v.to_le_bytes()));
        feed(&patch_w);
        feed(&pos);
        for b in &blocks {
            for t in [&b.qkv_w, &b.proj_w, &b.fc1_w, &b.fc2_w] {
                feed(t);
            }
        }
        Ok(RandomPatchTeacher {
            patch: p,
            dim: d,
            heads: cfg.teacher_heads,
            tokens: side * side,
            patch_w,
            patch_b: zeros(d),
            pos,
            blocks,
            digest: hex::encode(h.finalize()),
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens
    }

    fn patchify(&self, image: &Tensor<f32>) -> Result<Vec<f32>> {
        let s = image.shape();
        if s.len() != 3
            || s[0] != 3
            || s[1] != s[2]
            || s[1] / self.patch * (s[1] / self.patch) != self.tokens
            || !s[1].is_multiple_of(self.patch)
        {
            return Err(Error::Dimension(format!(
                "teacher expects a square 3-channel image with {} patches, got {s:?}",
                self.tokens
            )));
        }
        let (res, p) = (s[1], self.patch);
        let side = res / p;
        let d = image.data();
        let mut out = Vec::with_capacity(self.tokens * 3 * p * p);
        for pr in 0..side {
            for pc in 0..side {
                for c in 0..3 {
                    for y in 0..p {
                        let row = (c * res + pr * p + y) * res + pc * p;
                        out.extend_from_slice(&d[row..row + p]);
                    }
                }
            }
        }
        Ok(out)
    }

    fn attention(&self, x: &[f32], b: &TeacherBlock) -> Vec<f32> {
        let (l, d) = (self.tokens, self.dim);
        let hd = d / self.heads;
        let qkv = dense(x, l, &b.qkv_w, &b.qkv_b);
        let scale = 1.0 / (hd as f32).sqrt();
        let mut merged = vec![0f32; l * d];
        for head in 0..self.heads {
            let pick = |part: usize| -> Vec<f32> {
                (0..l).flat_map(|i| qkv[i * 3 * d + part * d + head * hd..][..hd].to_vec()).collect()
            };
            let (q, k, v) = (pick(0), pick(1), pick(2));
            let mut scores = vec![0f32; l * l];
            gemm(MatRef::row_major(&q, l, hd), MatRef::transposed(&k, hd, l), 0.0, &mut scores);
            for row in scores.chunks_mut(l) {
                let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b * scale));
                let mut sum = 0.0;
                for s in row.iter_mut() {
                    *s = (*s * scale - m).exp();
                    sum += *s;
                }
                row.iter_mut().for_each(|s| *s /= sum);
            }
            let ctx = matmul(&scores, l, l, &v, hd);
            for i in 0..l {
                merged[i * d + head * hd..][..hd].copy_from_slice(&ctx[i * hd..][..hd]);
            }
        }
        dense(&merged, l, &b.proj_w, &b.proj_b)
    }
}

impl TeacherProvider for RandomPatchTeacher {
    fn tokens(&self, image: &Tensor<f32>, _id: &str) -> Result<Tensor<f32>> {
        let patches = self.patchify(image)?;
        let (l, d) = (self.tokens, self.dim);
        let mut x = dense(&patches, l, &self.patch_w, &self.patch_b);
        x.iter_mut().zip(self.pos.data()).for_each(|(v, p)| *v += p);
        for b in &self.blocks {
            let a = self.attention(&layer_norm(&x, d), b);
            x.iter_mut().zip(&a).for_each(|(v, u)| *v += u);
            let mut hidden = dense(&layer_norm(&x, d), l, &b.fc1_w, &b.fc1_b);
            hidden.iter_mut().for_each(|v| *v = gelu(*v));
            let m = dense(&hidden, l, &b.fc2_w, &b.fc2_b);
            x.iter_mut().zip(&m).for_each(|(v, u)| *v += u);
        }
        Ok(Tensor::from_vec(&[l, d], x)?)
    }

    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn digest(&self) -> String {
        self.digest.clone()
    }
}

/// Reads precomputed tokens: `u32 L, u32 D` (little-endian) followed by
/// `L·D` row-major little-endian f32 values, one file per sample id.
pub struct ExternalTeacher {
    dir: PathBuf,
    dim: usize,
}

impl ExternalTeacher {
    pub fn new(dir: impl Into<PathBuf>, dim: usize) -> Self {
        ExternalTeacher { dir: dir.into(), dim }
    }

    pub fn path_for(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.tokens"))
    }
}

pub fn read_token_file(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.into() };
    let mut cur = std::io::Cursor::new(&bytes);
    let l = cur.read_u32::<LittleEndian>().map_err(|_| bad("missing header"))? as usize;
    let d = cur.read_u32::<LittleEndian>().map_err(|_| bad("missing header"))? as usize;
    if bytes.len() != 8 + 4 * l * d {
        return Err(bad("payload length does not match the L x D header"));
    }
    let data = (0..l * d).map(|_| cur.read_f32::<LittleEndian>().expect("length checked")).collect();
    Ok(Tensor::from_vec(&[l, d], data)?)
}

pub fn write_token_file(path: &Path, tokens: &Tensor<f32>) -> Result<()> {
    let mut out = Vec::with_capacity(8 + 4 * tokens.numel());
    out.extend_from_slice(&(tokens.shape()[0] as u32).to_le_bytes());
    out.extend_from_slice(&(tokens.shape()[1] as u32).to_le_bytes());
    tokens.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

impl TeacherProvider for ExternalTeacher {
    fn tokens(&self, _image: &Tensor<f32>, id: &str) -> Result<Tensor<f32>> {
        let t = read_token_file(&self.path_for(id))?;
        if t.shape()[1] != self.dim {
            return Err(Error::Format {
                path: self.path_for(id),
                reason: format!("token dimension {} differs from configured {}", t.shape()[1], self.dim),
            });
        }
        Ok(t)
    }

    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn digest(&self) -> String {
        format!("external:{}", self.dir.display())
    }
}

// ---------------------------------------------------------------------------
// projection head

/// φ: per-token MLP `C_f → hidden → hidden → D` with SiLU.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    layers: Vec<Linear>,
}

impl ProjectionHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let layers = vec![
            Linear::new(store, "head.fc1", in_dim, hidden, rng),
            Linear::new(store, "head.fc2", hidden, hidden, rng),
            Linear::new(store, "head.fc3", hidden, out_dim, rng),
        ];
        ProjectionHead { layers }
    }

    /// Flatten `[N, C_f, H_f, W_f]` to `[N·H_f·W_f, C_f]` (token `r·W_f + c`
    /// within each sample) and project every token. `tokens` is the teacher's
    /// L, which must equal `H_f·W_f`.
    pub fn project<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        m: Var,
        tokens: usize,
        trainable: bool,
    ) -> Result<Var> {
        let s = g.value(m).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::Dimension(format!("feature map must be [N, C, H, W], got {s:?}")));
        }
        if s[2] * s[3] != tokens {
            return Err(Error::AlignmentShape { hw: s[2] * s[3], tokens });
        }
        let mut x = g.to_tokens(m)?;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x, trainable)?;
            if i + 1 < self.layers.len() {
                x = g.silu(x);
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn mat(rows: usize, cols: usize, v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(&[rows, cols], v).unwrap()
    }

    #[test]
    fn special_cases() {
        let h = mat(2, 2, vec![1.0, 2.0, -3.0, 0.5]);
        assert!((distill_loss(&h, &h).unwrap() + 1.0).abs() < 1e-15);
        assert!((distill_loss(&h, &h.map(|v| -v)).unwrap() - 1.0).abs() < 1e-15);
        let orth = mat(2, 2, vec![-2.0, 1.0, -0.5, -3.0]);
        assert!(distill_loss(&h, &orth).unwrap().abs() < 1e-15);
        assert!(matches!(distill_loss(&h, &mat(1, 4, vec![0.0; 4])), Err(Error::Dimension(_))));
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total_loss(0.37, -0.9, 0.0).unwrap(), 0.37);
        assert!((total_loss(0.5, -0.8, 1.25).unwrap() + 0.5).abs() < 1e-15);
        assert!(total_loss(0.5, -0.8, -0.1).unwrap_err().is_config());
    }

    #[test]
    fn hand_flattened_two_by_two_token_order() {
        // Identity-like head is awkward; check the flatten directly through
        // the graph op the head uses.
        let mut g = Graph::<f64>::new();
        // channel 0: [[0,1],[2,3]], channel 1: [[10,11],[12,13]]
        let m = g.constant(Tensor::from_vec(&[1, 2, 2, 2], vec![0., 1., 2., 3., 10., 11., 12., 13.]).unwrap());
        let t = g.to_tokens(m).unwrap();
        // token r·W + c carries (ch0[r][c], ch1[r][c])
        assert_eq!(g.value(t).data(), &[0., 10., 1., 11., 2., 12., 3., 13.]);
    }

    #[test]
    fn head_shapes_and_shape_mismatch() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let head = ProjectionHead::new(&mut store, 8, 16, 5, &mut rng);
        let mut g = Graph::new();
        let m = g.constant(Tensor::zeros(&[2, 8, 4, 4]));
        let p = head.project(&mut g, &store, m, 16, true).unwrap();
        assert_eq!(g.value(p).shape(), &[32, 5]);
        let m = g.constant(Tensor::zeros(&[1, 8, 8, 8]));
        match head.project(&mut g, &store, m, 256, true) {
            Err(Error::AlignmentShape { hw, tokens }) => assert_eq!((hw, tokens), (64, 256)),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn teacher_token_counts_determinism_and_divisibility() {
        let cfg = AlignmentConfig { teacher_patch: 8, ..AlignmentConfig::default() };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t = RandomPatchTeacher::new(&cfg, 64, &mut rng).unwrap();
        let img = Tensor::from_fn(&[3, 64, 64], |i| ((i % 7) as f32 - 3.0) / 3.0);
        let a = t.tokens(&img, "x").unwrap();
        assert_eq!(a.shape(), &[64, 64]);
        assert_eq!(a, t.tokens(&img, "x").unwrap());
        assert!(a.is_finite());
        let cfg = AlignmentConfig { teacher_patch: 16, ..AlignmentConfig::default() };
        let t = RandomPatchTeacher::new(&cfg, 256, &mut rng).unwrap();
        assert_eq!(t.num_tokens(), 256);
        assert!(RandomPatchTeacher::new(&cfg, 60, &mut rng).err().unwrap().is_config());
    }

    #[test]
    fn external_teacher_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tok = Tensor::from_fn(&[4, 3], |i| i as f32 * 0.5);
        write_token_file(&dir.path().join("a.tokens"), &tok).unwrap();
        let ext = ExternalTeacher::new(dir.path(), 3);
        assert_eq!(ext.tokens(&Tensor::zeros(&[3, 8, 8]), "a").unwrap(), tok);
        assert!(matches!(ext.tokens(&Tensor::zeros(&[3, 8, 8]), "missing"), Err(Error::Io { .. })));
        assert!(matches!(
            ExternalTeacher::new(dir.path(), 4).tokens(&Tensor::zeros(&[3, 8, 8]), "a"),
            Err(Error::Format { .. })
        ));
    }

    proptest! {
        #[test]
        fn bounded_and_scale_invariant(
            v in proptest::collection::vec(-10.0f64..10.0, 24),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            let h = mat(4, 3, v[..12].to_vec());
            let p = mat(4, 3, v[12..].to_vec());
            let l = distill_loss(&h, &p).unwrap();
            prop_assert!((-1.0..=1.0).contains(&l));
            let scaled = distill_loss(&h.map(|x| a * x), &p.map(|x| b * x)).unwrap();
            // Rows far from the ε guard are exactly invariant up to rounding.
            let norms_ok = (0..4).all(|r| {
                let n = |t: &Tensor<f64>| t.data()[r * 3..r * 3 + 3].iter().map(|x| x * x).sum::<f64>().sqrt();
                n(&h) > 1e-3 && n(&p) > 1e-3
            });
            if norms_ok {
                prop_assert!((l - scaled).abs() < 1e-12);
            }
        }
    }
}
