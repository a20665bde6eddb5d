//! Tagged-section binary container used for codec, training and inference
//! checkpoints.
//!
//! Layout: `b"LSEG"`, u32 version, u32 section count, then per section a
//! 4-byte tag, u64 payload length and the payload. Integers are
//! little-endian.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use latseg_nn::ParamStore;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LSEG";
pub const VERSION: u32 = 1;

pub type Tag = [u8; 4];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    sections: Vec<(Tag, Vec<u8>)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tag: Tag, payload: Vec<u8>) {
        self.sections.push((tag, payload));
    }

    pub fn push_params(&mut self, tag: Tag, store: &ParamStore<f32>) -> Result<()> {
        let mut buf = Vec::new();
        store.write_to(&mut buf)?;
        self.push(tag, buf);
        Ok(())
    }

    pub fn push_json<S: serde::Serialize>(&mut self, tag: Tag, value: &S) -> Result<()> {
        self.push(tag, serde_json::to_vec(value)?);
        Ok(())
    }

    pub fn get(&self, tag: Tag) -> Option<&[u8]> {
        self.sections.iter().find(|(t, _)| *t == tag).map(|(_, p)| p.as_slice())
    }

    pub fn tags(&self) -> impl Iterator<Item = Tag> + '_ {
        self.sections.iter().map(|(t, _)| *t)
    }

    pub fn require(&self, tag: Tag, path: &Path) -> Result<&[u8]> {
        self.get(tag).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: format!("missing section {}", String::from_utf8_lossy(&tag)),
        })
    }

    pub fn params(&self, tag: Tag, path: &Path) -> Result<ParamStore<f32>> {
        let mut cur = Cursor::new(self.require(tag, path)?);
        Ok(ParamStore::read_from(&mut cur)?)
    }

    pub fn json<D: serde::de::DeserializeOwned>(&self, tag: Tag, path: &Path) -> Result<D> {
        Ok(serde_json::from_slice(self.require(tag, path)?)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).expect("vec write");
        out.write_u32::<LittleEndian>(self.sections.len() as u32).expect("vec write");
        for (tag, payload) in &self.sections {
            out.extend_from_slice(tag);
            out.write_u64::<LittleEndian>(payload.len() as u64).expect("vec write");
            out.extend_from_slice(payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(|_| bad("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated header".into()))?;
        if version != VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let count = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated header".into()))?;
        let mut sections = Vec::new();
        for i in 0..count {
            let mut tag = [0u8; 4];
            cur.read_exact(&mut tag).map_err(|_| bad(format!("truncated section {i}")))?;
            let len = cur.read_u64::<LittleEndian>().map_err(|_| bad(format!("truncated section {i}")))?;
            let start = cur.position() as usize;
            let end = start.checked_add(len as usize).filter(|&e| e <= bytes.len());
            let end = end.ok_or_else(|| bad(format!("section {i} overruns the file")))?;
            sections.push((tag, bytes[start..end].to_vec()));
            cur.set_position(end as u64);
        }
        if cur.position() as usize != bytes.len() {
            return Err(bad("trailing bytes after last section".into()));
        }
        Ok(Container { sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let mut c = Container::new();
        c.push(*b"AAAA", vec![1, 2, 3]);
        c.push(*b"BBBB", vec![]);
        let bytes = c.to_bytes();
        let p = Path::new("mem");
        assert_eq!(Container::from_bytes(&bytes, p).unwrap(), c);
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad, p), Err(Error::Format { .. })));
    }
}
