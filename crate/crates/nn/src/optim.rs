use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{NnError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    /// PyTorch `torch.optim.AdamW` defaults.
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam with decoupled weight decay. State is laid out in store order.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    config: AdamWConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamW { config, first: zeros(), second: zeros(), steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. A `None` gradient is treated as zero: moments decay and
    /// weight decay still applies.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(NnError::Shape(format!(
                "optimizer tracks {} parameters, store has {}, got {} gradients",
                self.first.len(),
                store.len(),
                grads.len()
            )));
        }
        self.steps += 1;
        let c = self.config;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let bias1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bias2 = 1.0 - c.beta2.powi(self.steps as i32);
        let step_size = T::from_f64_lossy(lr / bias1);
        let bias2_sqrt = T::from_f64_lossy(bias2.sqrt());
        let eps = T::from_f64_lossy(c.eps);
        let decay = T::from_f64_lossy(1.0 - lr * c.weight_decay);
        let one_minus_b1 = T::one() - b1;
        let one_minus_b2 = T::one() - b2;
        for (i, grad) in grads.iter().enumerate() {
            let id = crate::ParamId(i);
            let param = store.get_mut(id);
            if let Some(g) = grad {
                param.expect_same_shape(g)?;
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = param.data_mut();
            for j in 0..p.len() {
                let gj = grad.as_ref().map_or(T::zero(), |g| g.data()[j]);
                p[j] = p[j] * decay;
                m[j] = b1 * m[j] + one_minus_b1 * gj;
                v[j] = b2 * v[j] + one_minus_b2 * gj * gj;
                let denom = v[j].sqrt() / bias2_sqrt + eps;
                p[j] = p[j] - step_size * m[j] / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        let mut opt = AdamW::new(&s, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let g = Tensor::from_vec(&[2], vec![3.0, -0.5]).unwrap();
        opt.step(&mut s, &[Some(g)], 0.1).unwrap();
        let w = s.get(crate::ParamId(0)).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::from_vec(&[1], vec![5.0]).unwrap());
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        for _ in 0..2000 {
            let w = s.get(crate::ParamId(0)).data()[0];
            let g = Tensor::from_vec(&[1], vec![2.0 * (w - 2.0)]).unwrap();
            opt.step(&mut s, &[Some(g)], 0.05).unwrap();
        }
        assert!((s.get(crate::ParamId(0)).data()[0] - 2.0).abs() < 0.05);
    }
}
