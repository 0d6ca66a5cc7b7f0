//! Binary container for named tensors plus a JSON metadata blob.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "DOSECKPT"
//! version      u32      1
//! meta_len     u64
//! meta         meta_len bytes of UTF-8 JSON
//! count        u32
//! count × { name_len u32, name bytes, ndim u32, dims u64 × ndim, data f64 × Π dims }
//! ```
//!
//! Floats are stored as raw IEEE-754 bits, so save/load is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::CheckpointError;
use crate::tensor::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"DOSECKPT";
const VERSION: u32 = 1;

/// Named tensors with free-form metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: ParamSet,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            metadata,
            tensors: ParamSet::new(),
        }
    }

    /// Copies every tensor of `params` in under `prefix.` names.
    pub fn add_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.tensors.insert(format!("{prefix}.{name}"), t.clone());
        }
    }

    /// Rebuilds the sub-collection stored under `prefix.` in original order.
    pub fn params(&self, prefix: &str) -> ParamSet {
        let p = format!("{prefix}.");
        let mut out = ParamSet::new();
        for (name, t) in self.tensors.iter() {
            if let Some(rest) = name.strip_prefix(&p) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensors
            .by_name(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T, CheckpointError> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| CheckpointError::Missing(format!("metadata key {key}")))?;
        serde_json::from_value(v.clone()).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.metadata).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in self.tensors.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let meta_len = read_u64(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let metadata = serde_json::from_slice(&meta).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let count = read_u32(&mut r)?;
        let mut tensors = ParamSet::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            if tensors.index_of(&name).is_some() {
                return Err(CheckpointError::Corrupt(format!("duplicate tensor {name}")));
            }
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(vals in prop::collection::vec(any::<f64>(), 0..40), rows in 1usize..4) {
            let cols = vals.len() / rows;
            let mut ck = Checkpoint::new(serde_json::json!({"kind": "test", "width": cols}));
            ck.tensors.insert("m", Tensor::new(vec![rows, cols], vals[..rows * cols].to_vec()).unwrap());
            ck.tensors.insert("v", Tensor::vector(vals.clone()));
            let mut buf = Vec::new();
            ck.write_to(&mut buf).unwrap();
            let back = Checkpoint::read_from(buf.as_slice()).unwrap();
            prop_assert_eq!(back.metadata, ck.metadata);
            for ((n1, a), (n2, b)) in back.tensors.iter().zip(ck.tensors.iter()) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(a.shape(), b.shape());
                let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(ab, bb);
            }
        }
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(matches!(
            Checkpoint::read_from(&b"NOTACKPTxxxx"[..]),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn prefixes_split_collections() {
        let mut a = ParamSet::new();
        a.insert("w", Tensor::vector(vec![1.0]));
        let mut b = ParamSet::new();
        b.insert("w", Tensor::vector(vec![2.0]));
        let mut ck = Checkpoint::default();
        ck.add_params("enc", &a);
        ck.add_params("dec", &b);
        assert_eq!(ck.params("enc"), a);
        assert_eq!(ck.params("dec"), b);
    }
}
