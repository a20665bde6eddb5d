use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

/// Uniform in `[-bound, bound]`, the PyTorch default for conv/linear layers
/// with `bound = 1/sqrt(fan_in)`.
pub fn uniform_tensor<T: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
}

pub fn normal_tensor<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("standard deviation must be finite and non-negative");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Square kernel with "same" padding for odd sizes.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
        let weight = store
            .add(format!("{name}.weight"), uniform_tensor(&[out_channels, in_channels, kernel, kernel], bound, rng));
        let bias = store.add(format!("{name}.bias"), uniform_tensor(&[out_channels], bound, rng));
        Conv2d { weight, bias: Some(bias), in_channels, out_channels, kernel, stride, pad: kernel / 2 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, trainable: bool) -> Result<Var> {
        let (w, b) = if trainable {
            (g.param(store, self.weight), self.bias.map(|b| g.param(store, b)))
        } else {
            (g.frozen_param(store, self.weight), self.bias.map(|b| g.frozen_param(store, b)))
        };
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_tensor(&[out_features, in_features], bound, rng));
        let bias = store.add(format!("{name}.bias"), uniform_tensor(&[out_features], bound, rng));
        Linear { weight, bias: Some(bias), in_features, out_features }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, trainable: bool) -> Result<Var> {
        let (w, b) = if trainable {
            (g.param(store, self.weight), self.bias.map(|b| g.param(store, b)))
        } else {
            (g.frozen_param(store, self.weight), self.bias.map(|b| g.frozen_param(store, b)))
        };
        g.linear(x, w, b)
    }

    /// Plain forward on a `[M, in]` tensor without a graph.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, store, xv, false)?;
        Ok(g.value(y).clone())
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub channels: usize,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, groups: usize, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        GroupNorm { gamma, beta, groups, channels }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, trainable: bool) -> Result<Var> {
        let (gm, bt) = if trainable {
            (g.param(store, self.gamma), g.param(store, self.beta))
        } else {
            (g.frozen_param(store, self.gamma), g.frozen_param(store, self.beta))
        };
        g.group_norm(x, gm, bt, self.groups, T::from_f64_lossy(Self::EPS))
    }
}
