//! Binary checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic          8 bytes   "RWKVPSP\0"
//! manifest_len   u64 LE
//! manifest       JSON, manifest_len bytes
//! payload        f32 LE, every tensor back to back in manifest order
//! ```
//!
//! The manifest carries the format version, the model config, one entry per
//! tensor (name, shape, element offset and length into the payload), the
//! freeze mask if any, and the seeds that produced the weights. Tensors are
//! written in name order and the JSON has a fixed key order, so saving a
//! loaded checkpoint reproduces the file byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{FreezeMask, Tensor};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PerspectiveModel};
use crate::params::ParamStore;

pub const MAGIC: [u8; 8] = *b"RWKVPSP\0";
pub const FORMAT_VERSION: u32 = 1;

/// One training stage that touched the weights, and its seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub stage: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub mask: Option<FreezeMask>,
    pub lineage: Vec<LineageEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    freeze_mask: Option<FreezeMask>,
    lineage: Vec<LineageEntry>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ParamStore<f32>) -> Self {
        Self {
            config,
            params,
            mask: None,
            lineage: Vec::new(),
        }
    }

    /// Checks that the parameters build a model of `config` and the mask covers them.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        PerspectiveModel::from_store(&self.config, &self.params)
            .map_err(|e| Error::Inconsistent(format!("parameters do not match the config: {e}")))?;
        if let Some(mask) = &self.mask {
            self.params.check_mask(mask)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut offset = 0;
        let tensors = self
            .params
            .iter()
            .map(|(name, t)| {
                let entry = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                    length: t.len(),
                };
                offset += t.len();
                entry
            })
            .collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            tensors,
            freeze_mask: self.mask.clone(),
            lineage: self.lineage.clone(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * offset);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic);
        }
        let rest = &bytes[MAGIC.len()..];
        let len_bytes: [u8; 8] =
            rest.get(..8)
                .and_then(|b| b.try_into().ok())
                .ok_or(Error::Truncated {
                    tensor: "<manifest length>".into(),
                })?;
        let manifest_len = usize::try_from(u64::from_le_bytes(len_bytes))
            .map_err(|_| Error::Inconsistent("manifest length overflows".into()))?;
        let json = rest[8..].get(..manifest_len).ok_or(Error::Truncated {
            tensor: "<manifest>".into(),
        })?;
        // Read the version alone first so a newer layout is reported as such.
        #[derive(Deserialize)]
        struct Version {
            format_version: u32,
        }
        let version: Version =
            serde_json::from_slice(json).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
        if version.format_version != FORMAT_VERSION {
            return Err(Error::UnknownVersion(version.format_version));
        }
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
        let payload = &rest[8 + manifest_len..];

        let mut params = ParamStore::new();
        let mut expected_offset = 0;
        for entry in &manifest.tensors {
            if entry.offset != expected_offset {
                return Err(Error::Inconsistent(format!(
                    "`{}` starts at {} instead of {expected_offset}",
                    entry.name, entry.offset
                )));
            }
            if entry.shape.iter().product::<usize>() != entry.length {
                return Err(Error::Inconsistent(format!(
                    "`{}` shape disagrees with its length",
                    entry.name
                )));
            }
            let raw = payload
                .get(4 * entry.offset..4 * (entry.offset + entry.length))
                .ok_or(Error::Truncated {
                    tensor: entry.name.clone(),
                })?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if params
                .insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)
                .is_some()
            {
                return Err(Error::Inconsistent(format!(
                    "`{}` appears twice",
                    entry.name
                )));
            }
            expected_offset += entry.length;
        }
        if payload.len() != 4 * expected_offset {
            return Err(Error::Inconsistent(format!(
                "{} trailing payload bytes",
                payload.len() as isize - 4 * expected_offset as isize
            )));
        }
        let checkpoint = Checkpoint {
            config: manifest.config,
            params,
            mask: manifest.freeze_mask,
            lineage: manifest.lineage,
        };
        checkpoint.validate()?;
        Ok(checkpoint)
    }
}

/// Writes through a sibling temporary file so a failed save never leaves a partial checkpoint.
pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint.to_bytes()?;
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::params::names;

    fn sample() -> Checkpoint {
        let config = ModelConfig::tiny();
        let params = init_model(&config, 4).unwrap();
        let mask = params.mask_where(|n| !names::is_base(n));
        Checkpoint {
            config,
            params,
            mask: Some(mask),
            lineage: vec![
                LineageEntry {
                    stage: "pretrain".into(),
                    seed: 4,
                },
                LineageEntry {
                    stage: "finetune".into(),
                    seed: 9,
                },
            ],
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &c).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
        assert_eq!(load_checkpoint(&path).unwrap(), c);
        assert!(!path.with_extension("partial").exists());
    }

    #[test]
    fn corrupt_files_have_distinct_errors() {
        let bytes = sample().to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic)));

        let key = b"\"format_version\":";
        let at = bytes.windows(key.len()).position(|w| w == key).unwrap() + key.len();
        let mut bad = bytes.clone();
        bad[at] = b'7';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::UnknownVersion(7))
        ));

        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Checkpoint::from_bytes(cut),
            Err(Error::Truncated { .. })
        ));

        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(
            Checkpoint::from_bytes(&long),
            Err(Error::Inconsistent(_))
        ));

        assert!(matches!(
            load_checkpoint("/nonexistent/x.ckpt"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn params_must_match_config() {
        let mut c = sample();
        c.config.perspectives = 4;
        assert!(matches!(c.to_bytes(), Err(Error::Inconsistent(_))));
    }
}
