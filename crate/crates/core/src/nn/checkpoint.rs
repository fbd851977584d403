//! Binary parameter checkpoints.
//!
//! Layout: a little-endian `u64` header length, a JSON header mapping each
//! tensor name to its byte offset (into the data section) and shape, then the
//! concatenated `f32` little-endian data.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Param, Real, Tensor};

pub const FORMAT: &str = "cclf-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub offset: u64,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

/// A loaded checkpoint: named `f32` arrays plus free-form metadata.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn from_params<R: Real>(params: &[(String, &Param<R>)]) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (name, p) in params {
            if tensors.insert(name.clone(), p.value.cast::<f32>()).is_some() {
                return Err(Error::invalid(format!("duplicate tensor name `{name}`")));
            }
        }
        Ok(Self {
            meta: BTreeMap::new(),
            tensors,
        })
    }

    /// Copies stored values into `params`, checking names and shapes.
    pub fn restore<R: Real>(&self, params: &mut [(String, &mut Param<R>)]) -> Result<()> {
        for (name, p) in params.iter() {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::invalid(format!("checkpoint has no tensor `{name}`")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape(
                    "checkpoint",
                    format!("{name}: stored {:?}, model {:?}", t.shape(), p.value.shape()),
                ));
            }
        }
        for (name, p) in params.iter_mut() {
            p.value = self.tensors[name.as_str()].cast();
            p.grad = None;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.insert(
                name.clone(),
                TensorEntry {
                    offset,
                    shape: t.shape().to_vec(),
                },
            );
            offset += 4 * t.numel() as u64;
        }
        let header = serde_json::to_vec(&Header {
            format: FORMAT.to_string(),
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for t in self.tensors.values() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len);
        if len > 1 << 30 {
            return Err(Error::invalid(format!("implausible header length {len}")));
        }
        let mut header = vec![0u8; len as usize];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        if header.format != FORMAT {
            return Err(Error::invalid(format!("unknown checkpoint format `{}`", header.format)));
        }
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        let mut tensors = BTreeMap::new();
        for (name, e) in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > data.len() {
                return Err(Error::invalid(format!("tensor `{name}` runs past end of file")));
            }
            let values = data[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.insert(name, Tensor::new(&e.shape, values)?);
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let a = Param::<f32>::new("a", Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, 9.0]).unwrap());
        let b = Param::<f32>::new("b", Tensor::scalar(0.25));
        let mut ck = Checkpoint::from_params(&[("x.a".into(), &a), ("x.b".into(), &b)]).unwrap();
        ck.meta.insert("env_step".into(), serde_json::json!(42));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta["env_step"], 42);
        let mut a2 = Param::<f32>::new("a", Tensor::zeros(&[2, 3]));
        let mut b2 = Param::<f32>::new("b", Tensor::zeros(&[1]));
        back.restore(&mut [("x.a".into(), &mut a2), ("x.b".into(), &mut b2)])
            .unwrap();
        assert_eq!(a2.value, a.value);
        assert_eq!(b2.value, b.value);
    }

    #[test]
    fn restore_checks_shape() {
        let a = Param::<f32>::new("a", Tensor::zeros(&[2]));
        let ck = Checkpoint::from_params(&[("a".into(), &a)]).unwrap();
        let mut wrong = Param::<f32>::new("a", Tensor::zeros(&[3]));
        assert!(ck.restore(&mut [("a".into(), &mut wrong)]).is_err());
        let mut missing = Param::<f32>::new("m", Tensor::zeros(&[2]));
        assert!(ck.restore(&mut [("m".into(), &mut missing)]).is_err());
    }
}
