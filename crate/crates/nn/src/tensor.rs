use crate::scalar::Scalar;
use crate::{NnError, Result};

/// Dense row-major tensor that owns its buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NnError::Shape(format!(
                "shape {shape:?} holds {numel} elements but buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Value of a rank-0 (or single element) tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor with shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(NnError::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(NnError::Shape(format!("shape mismatch: {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise conversion between precisions.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect() }
    }

    /// Slice `index` along the leading axis.
    pub fn select(&self, index: usize) -> Tensor<T> {
        let inner: usize = self.shape[1..].iter().product();
        Tensor { shape: self.shape[1..].to_vec(), data: self.data[index * inner..(index + 1) * inner].to_vec() }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = items.first().ok_or_else(|| NnError::Shape("cannot stack an empty list".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for item in items {
            first.expect_same_shape(item)?;
            data.extend_from_slice(&item.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Concatenate along the leading axis; trailing dims must agree.
    pub fn concat_batch(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| NnError::Shape("cannot concatenate an empty list".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.rank() == 0 || p.shape[1..] != first.shape[1..] {
                return Err(NnError::Shape(format!(
                    "cannot concatenate {:?} with {:?} along axis 0",
                    first.shape, p.shape
                )));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Tensor { shape, data })
    }

    /// Concatenate rank-4 `[N, C, H, W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| NnError::Shape("cannot concatenate an empty list".into()))?;
        if first.rank() != 4 {
            return Err(NnError::Shape(format!("expected rank 4, got {:?}", first.shape)));
        }
        let (n, h, w) = (first.shape[0], first.shape[2], first.shape[3]);
        let mut channels = 0;
        for p in parts {
            if p.rank() != 4 || p.shape[0] != n || p.shape[2] != h || p.shape[3] != w {
                return Err(NnError::Shape(format!(
                    "cannot concatenate {:?} with {:?} along channels",
                    first.shape, p.shape
                )));
            }
            channels += p.shape[1];
        }
        let mut data = Vec::with_capacity(n * channels * h * w);
        for b in 0..n {
            for p in parts {
                let per = p.shape[1] * h * w;
                data.extend_from_slice(&p.data[b * per..(b + 1) * per]);
            }
        }
        Ok(Tensor { shape: vec![n, channels, h, w], data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_channels_interleaves_per_sample() {
        let a = Tensor::<f32>::from_fn(&[2, 1, 1, 2], |i| i as f32);
        let b = Tensor::<f32>::from_fn(&[2, 2, 1, 2], |i| 10.0 + i as f32);
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3, 1, 2]);
        assert_eq!(c.data(), &[0., 1., 10., 11., 12., 13., 2., 3., 14., 15., 16., 17.]);
    }

    #[test]
    fn reshape_rejects_wrong_count() {
        let t = Tensor::<f64>::zeros(&[2, 3]);
        assert!(t.reshape(&[4]).is_err());
    }
}
