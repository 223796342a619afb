//! Named-parameter checkpoints.
//!
//! Layout: `u64` little-endian index length, the JSON index, then all
//! parameters as little-endian `f32` in visiting order. The index records
//! each tensor's name, shape and byte offset into the payload, plus the
//! SHA-256 of the payload and free-form metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Float, Module, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Index {
    sha256: String,
    tensors: Vec<CheckpointEntry>,
    meta: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
    pub tensors: Vec<Tensor<f32>>,
    pub meta: serde_json::Value,
    /// Hex SHA-256 of the parameter payload.
    pub hash: String,
}

/// Writes `module` and returns the payload hash.
pub fn save_checkpoint<T: Float, M: Module<T> + ?Sized>(path: &Path, module: &M, meta: &serde_json::Value) -> Result<String> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    module.visit(&mut |p| {
        tensors.push(CheckpointEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: payload.len(),
        });
        for &v in p.value.data() {
            payload.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    });
    let hash = hex::encode(Sha256::digest(&payload));
    let index = serde_json::to_vec(&Index {
        sha256: hash.clone(),
        tensors,
        meta: meta.clone(),
    })?;
    let mut buf = Vec::with_capacity(8 + index.len() + payload.len());
    buf.extend_from_slice(&(index.len() as u64).to_le_bytes());
    buf.extend_from_slice(&index);
    buf.extend_from_slice(&payload);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write-then-rename so a crash never leaves a torn checkpoint behind.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(hash)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("truncated header"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 8 + n {
        return Err(bad("truncated index"));
    }
    let index: Index = serde_json::from_slice(&bytes[8..8 + n])?;
    let payload = &bytes[8 + n..];
    let hash = hex::encode(Sha256::digest(payload));
    if hash != index.sha256 {
        return Err(bad("payload hash mismatch"));
    }
    let mut tensors = Vec::with_capacity(index.tensors.len());
    for e in &index.tensors {
        let len: usize = e.shape.iter().product();
        let end = e.offset + 4 * len;
        if end > payload.len() {
            return Err(bad(&format!("tensor `{}` extends past the payload", e.name)));
        }
        let data = payload[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor::new(e.shape.clone(), data)?);
    }
    Ok(Checkpoint {
        entries: index.tensors,
        tensors,
        meta: index.meta,
        hash,
    })
}

/// Loads parameters into `module`, which must have the same names and
/// shapes in the same order. Returns the stored metadata.
pub fn load_checkpoint<T: Float, M: Module<T> + ?Sized>(path: &Path, module: &mut M) -> Result<serde_json::Value> {
    let ckpt = read_checkpoint(path)?;
    let mut k = 0;
    let mut err = None;
    module.visit_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        match ckpt.entries.get(k) {
            Some(e) if e.name == p.name && e.shape == p.value.shape() => {
                for (dst, &src) in p.value.data_mut().iter_mut().zip(ckpt.tensors[k].data()) {
                    *dst = T::c(f64::from(src));
                }
            }
            Some(e) => {
                err = Some(Error::Format(format!(
                    "checkpoint tensor `{}` {:?} does not match parameter `{}` {:?}",
                    e.name,
                    e.shape,
                    p.name,
                    p.value.shape()
                )))
            }
            None => err = Some(Error::Format(format!("checkpoint lacks parameter `{}`", p.name))),
        }
        k += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if k != ckpt.entries.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model has {k}",
            ckpt.entries.len()
        )));
    }
    Ok(ckpt.meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::<f32>::new("fc", 3, 2, &mut rng);
        let h = save_checkpoint(&p, &lin, &serde_json::json!({"iter": 7})).unwrap();
        let mut other = Linear::<f32>::zeros("fc", 3, 2);
        let meta = load_checkpoint(&p, &mut other).unwrap();
        assert_eq!(meta["iter"], 7);
        assert_eq!(other, lin);
        assert_eq!(read_checkpoint(&p).unwrap().hash, h);

        let mut wrong = Linear::<f32>::zeros("head", 3, 2);
        assert!(load_checkpoint(&p, &mut wrong).is_err());

        let mut bytes = std::fs::read(&p).unwrap();
        *bytes.last_mut().unwrap() ^= 1;
        std::fs::write(&p, bytes).unwrap();
        assert!(read_checkpoint(&p).is_err());
    }
}
