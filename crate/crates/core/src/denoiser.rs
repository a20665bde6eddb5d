//! Small convolutional U-Net over concatenated `(z^x, z_t)` latents with a
//! sinusoidal timestep embedding and an exposed encoder feature map.

use std::sync::atomic::{AtomicU64, Ordering};

use latseg_nn::{Conv2d, Graph, GroupNorm, Linear, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// C_lat; the network reads `2·C_lat` channels once the input layer is
    /// duplicated.
    pub latent_channels: usize,
    pub base_channels: usize,
    /// Width multiplier per resolution level.
    pub channel_mults: Vec<usize>,
    pub norm_groups: usize,
    /// Encoder block whose output is exposed as the feature map `m`.
    pub tap_block: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_channels: 4,
            base_channels: 32,
            channel_mults: vec![1, 2, 2],
            norm_groups: 8,
            tap_block: 2,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 {
            return Err(Error::config("denoiser.latent_channels", "must be positive"));
        }
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return Err(Error::config("denoiser.channel_mults", "needs at least one positive level"));
        }
        if self.base_channels < 2 || !self.base_channels.is_multiple_of(2) {
            return Err(Error::config("denoiser.base_channels", "must be even and at least 2"));
        }
        if self.norm_groups == 0
            || self.channel_mults.iter().any(|m| !(m * self.base_channels).is_multiple_of(self.norm_groups))
        {
            return Err(Error::config("denoiser.norm_groups", "must divide every level width"));
        }
        if self.tap_block >= self.channel_mults.len() {
            return Err(Error::config(
                "alignment.tap_block",
                format!("must be below the number of levels ({})", self.channel_mults.len()),
            ));
        }
        Ok(())
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base_channels
    }

    /// Spatial side of the tapped feature map for a latent of side `size`.
    pub fn tap_size(&self, latent_size: usize) -> usize {
        latent_size >> self.tap_block
    }

    pub fn tap_channels(&self) -> usize {
        self.level_channels(self.tap_block)
    }

    /// Latent sides must survive one halving per level below the top.
    pub fn check_latent_size(&self, size: usize) -> Result<()> {
        let f = 1 << (self.channel_mults.len() - 1);
        if size == 0 || !size.is_multiple_of(f) {
            return Err(Error::config(
                "resolution",
                format!(
                    "latent side {size} must be a positive multiple of {f} for {} levels",
                    self.channel_mults.len()
                ),
            ));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of integer timesteps, `[N, dim]`:
/// `[sin(t·f_0) … sin(t·f_{d/2−1}), cos(t·f_0) …]`, `f_k = 10000^{−k/(d/2)}`.
pub fn timestep_embedding<T: Scalar>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let freqs = (0..half).map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp() * ti as f64);
        let (s, c): (Vec<f64>, Vec<f64>) = freqs.map(|a| (a.sin(), a.cos())).unzip();
        out.extend(s.into_iter().chain(c).map(T::from_f64_lossy));
    }
    Tensor::from_vec(&[t.len(), dim], out).expect("sizes agree")
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        cfg: &DenoiserConfig,
        rng: &mut R,
    ) -> Self {
        ResBlock {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cfg.norm_groups, cin),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, rng),
            time: Linear::new(store, &format!("{name}.time"), cfg.time_dim(), cout, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cfg.norm_groups, cout),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, rng)),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, temb: Var, tr: bool) -> Result<Var> {
        let mut h = self.norm1.forward(g, s, x, tr)?;
        h = g.silu(h);
        h = self.conv1.forward(g, s, h, tr)?;
        let tb = self.time.forward(g, s, temb, tr)?;
        h = g.add_channel_bias(h, tb)?;
        h = self.norm2.forward(g, s, h, tr)?;
        h = g.silu(h);
        h = self.conv2.forward(g, s, h, tr)?;
        let skip = match &self.skip {
            Some(c) => c.forward(g, s, x, tr)?,
            None => x,
        };
        Ok(g.add(h, skip)?)
    }
}

/// The input convolution stored as one weight per `C_lat`-channel group so
/// that `Σ_g conv(x_g, W_g) + b` is evaluated identically whether there is
/// one group or two halved copies.
#[derive(Clone, Debug)]
struct InputLayer {
    weights: Vec<ParamId>,
    bias: ParamId,
    group_channels: usize,
}

impl InputLayer {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, tr: bool) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (i, &w) in self.weights.iter().enumerate() {
            let xi = if self.weights.len() == 1 {
                x
            } else {
                g.slice_channels(x, i * self.group_channels, self.group_channels)?
            };
            let wv = if tr { g.param(s, w) } else { g.frozen_param(s, w) };
            let y = g.conv2d(xi, wv, None, 1, 1)?;
            acc = Some(match acc {
                None => y,
                Some(a) => g.add(a, y)?,
            });
        }
        let b = if tr { g.param(s, self.bias) } else { g.frozen_param(s, self.bias) };
        Ok(g.add_bias(acc.expect("at least one group"), b)?)
    }
}

#[derive(Debug)]
pub struct DenoiserNet {
    config: DenoiserConfig,
    input: InputLayer,
    time1: Linear,
    time2: Linear,
    down_blocks: Vec<ResBlock>,
    downsamplers: Vec<Conv2d>,
    mid: ResBlock,
    up_blocks: Vec<ResBlock>,
    upsamplers: Vec<Conv2d>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    evaluations: AtomicU64,
}

impl Clone for DenoiserNet {
    fn clone(&self) -> Self {
        DenoiserNet {
            config: self.config.clone(),
            input: self.input.clone(),
            time1: self.time1.clone(),
            time2: self.time2.clone(),
            down_blocks: self.down_blocks.clone(),
            downsamplers: self.downsamplers.clone(),
            mid: self.mid.clone(),
            up_blocks: self.up_blocks.clone(),
            upsamplers: self.upsamplers.clone(),
            out_norm: self.out_norm.clone(),
            out_conv: self.out_conv.clone(),
            evaluations: AtomicU64::new(0),
        }
    }
}

pub struct DenoiserOutput {
    pub pred: Var,
    /// Tapped encoder feature map `[N, C_f, H_f, W_f]`.
    pub tap: Var,
}

impl DenoiserNet {
    /// A network reading `C_lat` channels, the state before conditioning is
    /// added by [`DenoiserNet::duplicate_input_layer`].
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &DenoiserConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.latent_channels;
        let base = config.base_channels;
        let probe = Conv2d::new(store, "input", c, base, 3, 1, rng);
        let input =
            InputLayer { weights: vec![probe.weight], bias: probe.bias.expect("conv has bias"), group_channels: c };
        let time1 = Linear::new(store, "time.fc1", base, config.time_dim(), rng);
        let time2 = Linear::new(store, "time.fc2", config.time_dim(), config.time_dim(), rng);

        let levels = config.channel_mults.len();
        let mut down_blocks = Vec::new();
        let mut downsamplers = Vec::new();
        let mut ch = base;
        for l in 0..levels {
            let out = config.level_channels(l);
            down_blocks.push(ResBlock::new(store, &format!("down{l}"), ch, out, config, rng));
            ch = out;
            if l + 1 < levels {
                downsamplers.push(Conv2d::new(store, &format!("down{l}.pool"), ch, ch, 3, 2, rng));
            }
        }
        let mid = ResBlock::new(store, "mid", ch, ch, config, rng);
        let mut up_blocks = Vec::new();
        let mut upsamplers = Vec::new();
        for l in (0..levels).rev() {
            let out = config.level_channels(l);
            up_blocks.push(ResBlock::new(store, &format!("up{l}"), ch + out, out, config, rng));
            ch = out;
            if l > 0 {
                upsamplers.push(Conv2d::new(store, &format!("up{l}.upsample"), ch, ch, 3, 1, rng));
            }
        }
        let out_norm = GroupNorm::new(store, "out.norm", config.norm_groups, ch);
        let out_conv = Conv2d::new(store, "out.conv", ch, c, 3, 1, rng);
        // Start from a zero prediction.
        for id in [out_conv.weight, out_conv.bias.expect("conv has bias")] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape));
        }
        Ok(DenoiserNet {
            config: config.clone(),
            input,
            time1,
            time2,
            down_blocks,
            downsamplers,
            mid,
            up_blocks,
            upsamplers,
            out_norm,
            out_conv,
            evaluations: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn input_channels(&self) -> usize {
        self.input.weights.len() * self.input.group_channels
    }

    pub fn is_duplicated(&self) -> bool {
        self.input.weights.len() > 1
    }

    /// Widen the input layer from `C_lat` to `2·C_lat` channels; both halves
    /// start as the original weights times 0.5, the bias is unchanged.
    pub fn duplicate_input_layer<T: Scalar>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.is_duplicated() {
            return Err(Error::State(format!(
                "input layer already reads {} channels; duplication applies once",
                self.input_channels()
            )));
        }
        let w0 = self.input.weights[0];
        let half = T::from_f64_lossy(0.5);
        let halved = store.get(w0).map(|v| v * half);
        store.set(w0, halved.clone());
        let w1 = store.add("input.weight.dup", halved);
        self.input.weights.push(w1);
        Ok(())
    }

    /// Per-image network evaluations since construction (or the last reset).
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.evaluations.store(0, Ordering::Relaxed);
    }

    /// Only the input layer, for checking duplication in isolation.
    pub fn input_layer_forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.input.forward(&mut g, store, xv, false)?;
        Ok(g.value(y).clone())
    }

    fn check_input(&self, s: &[usize]) -> Result<()> {
        if s.len() != 4 || s[1] != self.input_channels() {
            return Err(Error::Dimension(format!(
                "denoiser expects [N, {}, H, W] input, got {s:?}",
                self.input_channels()
            )));
        }
        self.config.check_latent_size(s[2])?;
        self.config.check_latent_size(s[3])
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z_in: Var,
        t: &[usize],
        trainable: bool,
    ) -> Result<DenoiserOutput> {
        let shape = g.value(z_in).shape().to_vec();
        self.check_input(&shape)?;
        if t.len() != shape[0] {
            return Err(Error::Dimension(format!("{} timesteps for a batch of {}", t.len(), shape[0])));
        }
        self.evaluations.fetch_add(shape[0] as u64, Ordering::Relaxed);
        let tr = trainable;
        let emb = g.constant(timestep_embedding(t, self.config.base_channels));
        let mut temb = self.time1.forward(g, store, emb, tr)?;
        temb = g.silu(temb);
        temb = self.time2.forward(g, store, temb, tr)?;
        let temb = g.silu(temb);

        let mut h = self.input.forward(g, store, z_in, tr)?;
        let mut skips = Vec::new();
        let mut tap = None;
        for (l, block) in self.down_blocks.iter().enumerate() {
            h = block.forward(g, store, h, temb, tr)?;
            skips.push(h);
            if l == self.config.tap_block {
                tap = Some(h);
            }
            if let Some(ds) = self.downsamplers.get(l) {
                h = ds.forward(g, store, h, tr)?;
            }
        }
        h = self.mid.forward(g, store, h, temb, tr)?;
        for (i, block) in self.up_blocks.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = g.concat_channels(&[h, skip])?;
            h = block.forward(g, store, h, temb, tr)?;
            if let Some(us) = self.upsamplers.get(i) {
                h = g.upsample2x(h)?;
                h = us.forward(g, store, h, tr)?;
            }
        }
        h = self.out_norm.forward(g, store, h, tr)?;
        h = g.silu(h);
        let pred = self.out_conv.forward(g, store, h, tr)?;
        Ok(DenoiserOutput { pred, tap: tap.expect("tap block is validated") })
    }

    /// Inference-only evaluation.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, z_in: &Tensor<T>, t: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(z_in.clone());
        let out = self.forward(&mut g, store, x, t, false)?;
        Ok(g.value(out.pred).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> DenoiserConfig {
        DenoiserConfig { latent_channels: 2, base_channels: 8, channel_mults: vec![1, 2], norm_groups: 2, tap_block: 1 }
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        latseg_nn::normal_tensor(shape, 1.0, &mut rng)
    }

    #[test]
    fn shapes_tap_and_determinism() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let mut net = DenoiserNet::new(&mut store, &small(), &mut rng).unwrap();
        net.duplicate_input_layer(&mut store).unwrap();
        let x = rand_tensor(&[3, 4, 8, 8], 1);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = net.forward(&mut g, &store, xv, &[1, 500, 1000], false).unwrap();
        assert_eq!(g.value(out.pred).shape(), &[3, 2, 8, 8]);
        assert_eq!(g.value(out.tap).shape(), &[3, 16, 4, 4]);
        let a = net.predict(&store, &x, &[1, 500, 1000]).unwrap();
        let b = net.predict(&store, &x, &[1, 500, 1000]).unwrap();
        assert_eq!(a, b);
        assert_eq!(net.evaluations(), 9);
    }

    #[test]
    fn duplication_is_exact_and_single_use() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let mut net = DenoiserNet::new(&mut store, &small(), &mut rng).unwrap();
        let z = rand_tensor(&[2, 2, 8, 8], 4);
        let before = net.input_layer_forward(&store, &z).unwrap();
        let zero_before = net.input_layer_forward(&store, &Tensor::zeros(&[1, 2, 8, 8])).unwrap();
        net.duplicate_input_layer(&mut store).unwrap();
        assert_eq!(net.input_channels(), 4);
        let zz = Tensor::concat_channels(&[&z, &z]).unwrap();
        let after = net.input_layer_forward(&store, &zz).unwrap();
        assert_eq!(before.data(), after.data());
        let zero_after = net.input_layer_forward(&store, &Tensor::zeros(&[1, 4, 8, 8])).unwrap();
        assert_eq!(zero_before.data(), zero_after.data());
        assert!(matches!(net.duplicate_input_layer(&mut store), Err(Error::State(_))));
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let net = DenoiserNet::new(&mut store, &small(), &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 4, 8, 8]);
        assert!(matches!(net.predict(&store, &x, &[1]), Err(Error::Dimension(_))));
    }

    #[test]
    fn embedding_matches_definition() {
        let e = timestep_embedding::<f64>(&[0, 7], 4);
        assert_eq!(&e.data()[..4], &[0.0, 0.0, 1.0, 1.0]);
        let f1 = (-(10000f64.ln()) / 2.0).exp();
        assert_eq!(e.data()[4], 7f64.sin());
        assert!((e.data()[5] - (7.0 * f1).sin()).abs() < 1e-15);
    }
}
