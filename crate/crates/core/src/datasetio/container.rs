//! Named-tensor container used for checkpoints and image indexes.
//!
//! ```text
//! magic     "XMC1"
//! meta_len  u32 LE, then meta_len bytes of UTF-8 JSON
//! count     u32 LE
//! count × { name_len u32 LE | name UTF-8 | rank u32 LE | dims u32 LE… | f64 LE payload }
//! ```
//!
//! Entries are written in lexicographic name order.

use std::fs;
use std::path::Path;

use super::tensorfile::{put_tensor_record, put_u32, ByteReader};
use crate::error::{Error, Result};
use crate::numkernel::ParamStore;

pub const CONTAINER_MAGIC: &[u8; 4] = b"XMC1";

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: ParamStore,
}

impl Container {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(16 + meta.len() + 8 * self.tensors.num_values());
        out.extend_from_slice(CONTAINER_MAGIC);
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(&meta);
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in self.tensors.iter() {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_tensor_record(&mut out, t)?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CONTAINER_MAGIC)?;
        let meta_len = r.u32("metadata length")? as usize;
        let at = r.offset();
        let meta_bytes = r.take(meta_len, "metadata")?;
        let meta = serde_json::from_slice(meta_bytes)
            .map_err(|e| Error::format(at, format!("metadata is not valid JSON: {e}")))?;
        let count = r.u32("entry count")? as usize;
        let mut tensors = ParamStore::new();
        for _ in 0..count {
            let at = r.offset();
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::format(at, "entry name is not UTF-8"))?
                .to_owned();
            let t = r.tensor_record()?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::format(at, format!("duplicate entry '{name}'")));
            }
        }
        r.finish()?;
        Ok(Container { meta, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Tensor;

    fn sample() -> Container {
        let mut tensors = ParamStore::new();
        tensors.insert("b", Tensor::vector(vec![1.0, -0.0, f64::MIN_POSITIVE]));
        tensors.insert("a.w", Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        Container { meta: serde_json::json!({"kind": "test", "x": 0.1}), tensors }
    }

    #[test]
    fn roundtrip() {
        let c = sample();
        let back = Container::decode(&c.encode().unwrap()).unwrap();
        assert_eq!(back.meta, c.meta);
        assert!(back.tensors.bit_eq(&c.tensors));
    }

    #[test]
    fn truncated_and_foreign() {
        let bytes = sample().encode().unwrap();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Container::decode(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut foreign = bytes.clone();
        foreign[..4].copy_from_slice(b"XMT1");
        assert!(matches!(Container::decode(&foreign), Err(Error::Format { offset: 0, .. })));
    }
}
