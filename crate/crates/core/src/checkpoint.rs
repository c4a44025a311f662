//! Versioned named-tensor archive.
//!
//! Layout: the 8-byte magic `FDCKPT\0\n`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then every
//! tensor's elements as little-endian `f64` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use facedepth_autograd::tensor::tensor;
use facedepth_autograd::ParamStore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Detector, ModelConfig};

pub const MAGIC: &[u8; 8] = b"FDCKPT\0\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    config_hash: String,
    epoch: usize,
    tensors: Vec<TensorEntry>,
    data_sha256: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Zero-based epoch whose weights these are.
    pub epoch: usize,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut data = Vec::with_capacity(self.params.num_elements() * 8);
        let mut tensors = Vec::with_capacity(self.params.len());
        for (_, name, t) in self.params.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            });
            for v in t.iter() {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            config_hash: self.train.hash(),
            epoch: self.epoch,
            tensors,
            data_sha256: hex::encode(Sha256::digest(&data)),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |d: &str| Error::corrupt(path, d);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(corrupt("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(&format!("header: {e}")))?;
        let data = &body[hlen..];
        if hex::encode(Sha256::digest(data)) != header.data_sha256 {
            return Err(corrupt("tensor data checksum mismatch"));
        }
        let mut params = ParamStore::new();
        let mut offset = 0;
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = offset + n * 8;
            if end > data.len() {
                return Err(corrupt("tensor data shorter than index"));
            }
            let values = data[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.add(entry.name.clone(), tensor(&entry.shape, values))?;
            offset = end;
        }
        if offset != data.len() {
            return Err(corrupt("trailing bytes after tensor data"));
        }
        if header.config_hash != header.train.hash() {
            return Err(corrupt("config hash does not match stored config"));
        }
        Ok(Self {
            model: header.model,
            train: header.train,
            epoch: header.epoch,
            params,
        })
    }

    /// Write atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Rebuild the detector and check that every stored tensor matches the
    /// current code's parameter names and shapes.
    pub fn instantiate(&self) -> Result<(Detector, ParamStore)> {
        let (det, mut store) = Detector::new(&self.model, 0)?;
        store.load_from(&self.params)?;
        Ok((det, store))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let train = TrainConfig::default();
        let model = train.model_config();
        let (_, params) = Detector::new(&model, 3).unwrap();
        Checkpoint {
            model,
            train,
            epoch: 4,
            params,
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back.model, c.model);
        assert_eq!(back.train, c.train);
        assert_eq!(back.epoch, 4);
        for ((_, n1, t1), (_, n2, t2)) in c.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert!(t1.iter().zip(t2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        back.instantiate().unwrap();
    }

    #[test]
    fn corruption_and_version_detected() {
        let bytes = sample().to_bytes();
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped, Path::new("x")), Err(Error::Corrupt { .. })));
        let mut old = bytes.clone();
        old[8] = 99;
        assert!(matches!(Checkpoint::from_bytes(&old, Path::new("x")), Err(Error::Version { found: 99, .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..30], Path::new("x")), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn mismatched_model_rejected() {
        let mut c = sample();
        c.model.backbone.head_width += 1;
        assert!(matches!(c.instantiate(), Err(Error::Params(_))));
    }
}
