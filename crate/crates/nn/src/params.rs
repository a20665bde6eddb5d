use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{NnError, Result};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_store_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named, ordered collection of trainable tensors.
///
/// Each store carries a process-unique id so a graph can bind parameters
/// from several stores without ambiguity. Cloning yields an independent
/// store with identical values and a new id.
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    params: Vec<Param<T>>,
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        ParamStore { uid: fresh_store_id(), params: self.params.clone() }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { uid: fresh_store_id(), params: Vec::new() }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        self.params[id.0].value = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values, hex encoded.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for p in &self.params {
            hasher.update((p.name.len() as u64).to_le_bytes());
            hasher.update(p.name.as_bytes());
            for &d in p.value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in p.value.data() {
                v.write_le(&mut buf);
            }
            hasher.update(&buf);
        }
        hex::encode(hasher.finalize())
    }

    /// Largest absolute elementwise difference to another store with the
    /// same layout.
    pub fn max_abs_diff(&self, other: &ParamStore<T>) -> Result<f64> {
        if self.params.len() != other.params.len() {
            return Err(NnError::Shape("parameter stores have different lengths".into()));
        }
        let mut worst = 0.0f64;
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name {
                return Err(NnError::Shape(format!("parameter {} vs {}", a.name, b.name)));
            }
            a.value.expect_same_shape(&b.value)?;
            for (&x, &y) in a.value.data().iter().zip(b.value.data()) {
                worst = worst.max((x.as_f64() - y.as_f64()).abs());
            }
        }
        Ok(worst)
    }

    /// Serialize as: u32 count, then per parameter u32 name length, UTF-8
    /// name, u32 rank, u64 dims, f32 little-endian values.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for p in &self.params {
            w.write_u32::<LittleEndian>(p.name.len() as u32)?;
            w.write_all(p.name.as_bytes())?;
            w.write_u32::<LittleEndian>(p.value.rank() as u32)?;
            for &d in p.value.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in p.value.data() {
                w.write_f32::<LittleEndian>(v.as_f64() as f32)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = r.read_u32::<LittleEndian>()? as usize;
            if name_len > 4096 {
                return Err(NnError::Format(format!("parameter name length {name_len} is implausible")));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| NnError::Format("parameter name is not UTF-8".into()))?;
            let rank = r.read_u32::<LittleEndian>()? as usize;
            if rank > 8 {
                return Err(NnError::Format(format!("parameter {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u64::<LittleEndian>()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(T::from_f64_lossy(r.read_f32::<LittleEndian>()? as f64));
            }
            store.add(name, Tensor::from_vec(&shape, data)?);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clone_gets_new_id_and_equal_digest() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::from_fn(&[2, 2], |i| i as f32 * 0.25));
        let c = s.clone();
        assert_ne!(s.uid(), c.uid());
        assert_eq!(s.digest(), c.digest());
        assert_eq!(s.max_abs_diff(&c).unwrap(), 0.0);
    }

    #[test]
    fn serialization_round_trip_preserves_digest() {
        let mut s = ParamStore::<f32>::new();
        s.add("a.weight", Tensor::from_fn(&[3, 1, 2], |i| (i as f32).sin()));
        s.add("a.bias", Tensor::from_fn(&[3], |i| -(i as f32)));
        let mut bytes = Vec::new();
        s.write_to(&mut bytes).unwrap();
        let back = ParamStore::<f32>::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.digest(), s.digest());
    }

    #[test]
    fn digest_changes_with_any_value() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add("w", Tensor::zeros(&[4]));
        let before = s.digest();
        s.get_mut(id).data_mut()[3] = 1e-30;
        assert_ne!(before, s.digest());
    }
}
