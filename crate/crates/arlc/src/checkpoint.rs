//! Binary checkpoint format.
//!
//! Layout: 4 magic bytes "ARLC"; u32 LE version (= 1); u32 LE tensor count;
//! per tensor: u16 LE name length, UTF-8 name, u8 dtype code (1 = f64),
//! u8 rank, rank x u64 LE dims, payload of little-endian f64; then a u32 LE
//! length-prefixed UTF-8 config blob. The config blob is stored verbatim so
//! save -> load -> save is byte-identical.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"ARLC";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;

/// Frozen-name list and run description are carried inside the config
/// blob; tensors and their order come from the store.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub config_text: String,
}

impl Checkpoint {
    pub fn new(store: ParamStore, config_text: String) -> Self {
        Checkpoint { store, config_text }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (name, param) in self.store.iter() {
            let name_bytes = name.as_bytes();
            if name_bytes.len() > u16::MAX as usize {
                return Err(Error::Validation(format!("tensor name too long: {name}")));
            }
            out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.push(DTYPE_F64);
            let shape = param.value.shape();
            if shape.len() > u8::MAX as usize {
                return Err(Error::Validation(format!("tensor rank too high: {name}")));
            }
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in param.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let blob = self.config_text.as_bytes();
        out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        out.extend_from_slice(blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {:02x?}, expected {:02x?}",
                magic, MAGIC
            )));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = cur.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
                .to_string();
            let dtype = cur.u8()?;
            if dtype != DTYPE_F64 {
                return Err(Error::Format(format!(
                    "tensor {name:?} has unsupported dtype code {dtype}"
                )));
            }
            let rank = cur.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            store.insert(&name, Tensor::new(shape, data)?)?;
        }
        let blob_len = cur.u32()? as usize;
        let config_text = std::str::from_utf8(cur.take(blob_len)?)
            .map_err(|e| Error::Format(format!("config blob is not UTF-8: {e}")))?
            .to_string();
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - cur.pos
            )));
        }
        let mut ckpt = Checkpoint { store, config_text };
        for name in ckpt.frozen_names() {
            ckpt.store.freeze(&name)?;
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Names listed under the `frozen=` key of the config blob.
    pub fn frozen_names(&self) -> Vec<String> {
        self.config_value("frozen")
            .map(|v| {
                v.split(',')
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Value of a `key=value` line in the config blob.
    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config_text.lines().find_map(|line| {
            let line = line.trim();
            if line.starts_with('#') {
                return None;
            }
            let (k, v) = line.split_once('=')?;
            (k.trim() == key).then(|| v.trim())
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample_store() -> ParamStore {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        store
            .insert("f.fc.weight", Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng))
            .unwrap();
        store
            .insert("c.fc.weight", Tensor::uniform(&[3, 3], -1.0, 1.0, &mut rng))
            .unwrap();
        store.freeze("f.fc.weight").unwrap();
        store
    }

    #[test]
    fn round_trip_preserves_tensors_and_frozen_flags() {
        let store = sample_store();
        let ckpt = Checkpoint::new(store, "phase=2\nfrozen=f.fc.weight\n".to_string());
        let bytes = ckpt.to_bytes().unwrap();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(
            loaded.store.get("f.fc.weight").unwrap().value,
            ckpt.store.get("f.fc.weight").unwrap().value
        );
        assert!(loaded.store.get("f.fc.weight").unwrap().frozen);
        assert!(!loaded.store.get("c.fc.weight").unwrap().frozen);
        assert_eq!(loaded.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let store = sample_store();
        let ckpt = Checkpoint::new(store, String::new());
        let mut bytes = ckpt.to_bytes().unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn empty_store_round_trips() {
        let ckpt = Checkpoint::new(ParamStore::new(), "phase=1\n".to_string());
        let bytes = ckpt.to_bytes().unwrap();
        // magic + version + count + blob length + blob
        assert_eq!(bytes.len(), 4 + 4 + 4 + 4 + 8);
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(loaded.store.is_empty());
        assert_eq!(loaded.config_value("phase"), Some("1"));
    }

    #[test]
    fn truncation_is_detected() {
        let ckpt = Checkpoint::new(sample_store(), "x=1\n".to_string());
        let bytes = ckpt.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
