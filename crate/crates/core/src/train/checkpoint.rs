//! Checkpoint file layout, all integers little-endian:
//!
//! ```text
//! "MGCK"             4 bytes
//! version            u32 = 1
//! meta_len           u32
//! meta               meta_len bytes of UTF-8 JSON (configs, epoch, dev EER, seed, step)
//! n_params           u32
//! per parameter:
//!   name_len         u32
//!   name             name_len bytes of UTF-8
//!   ndim             u32
//!   dims             ndim × u32
//!   values           numel × f64
//! ```
//!
//! Only parameter values are stored; optimizer moments are not.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, FormatError, Result};
use crate::model::Model;
use crate::tensor::Parameters;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub dev_eer: Option<f64>,
    /// RNG state: every random stream in training is derived from
    /// `(seed, step)`.
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<StoredParam>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::Truncated {
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, FormatError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| FormatError::Header(e.to_string()))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: CheckpointMeta) -> Self {
        let mut params = Vec::new();
        model.visit(&mut |name, p| {
            params.push(StoredParam {
                name: name.to_string(),
                shape: p.shape().to_vec(),
                values: p.data().to_vec(),
            })
        });
        Self { meta, params }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &p.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r
            .take(4)
            .map_err(|_| FormatError::Header("file shorter than the magic".into()))?
            .try_into()
            .unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| FormatError::Header(format!("metadata: {e}")))?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8)?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(StoredParam { name, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(FormatError::Header(format!(
                "{} trailing bytes after the last parameter",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { meta, params })
    }

    /// Writes to a new file; an existing file is an error.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_new(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|source| Error::Format {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Rebuilds the model, checking that names and shapes match the config.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::init(&self.meta.model, 0)?;
        let mut expected = Vec::new();
        model.visit(&mut |n, p| expected.push((n.to_string(), p.shape().to_vec())));
        let got: Vec<(String, Vec<usize>)> = self.params.iter().map(|p| (p.name.clone(), p.shape.clone())).collect();
        if expected != got {
            let diff = expected
                .iter()
                .zip(&got)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| format!("expected {} parameters, found {}", expected.len(), got.len()));
            return Err(Error::data(format!("checkpoint does not match its model config: {diff}")));
        }
        let mut i = 0;
        let mut err = None;
        model.visit_mut(&mut |_, p| {
            if let Err(e) = p.set_data(&self.params[i].values) {
                err.get_or_insert(e);
            }
            i += 1;
        });
        match err {
            Some(e) => Err(e),
            None => Ok(model),
        }
    }
}
