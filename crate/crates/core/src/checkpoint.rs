//! Checkpoints: a JSON manifest plus a flat little-endian `f64` payload.
//!
//! The manifest lists every parameter group with its shape, byte offset and
//! element count, in group order. The payload file sits next to the
//! manifest with the `.bin` extension.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Result, RoseError};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const FORMAT: &str = "rose-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub step: u64,
    pub data_file: String,
    pub total_bytes: u64,
    pub groups: Vec<GroupEntry>,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub step: u64,
    pub config: RunConfig,
}

pub fn payload_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

pub fn encode(params: &ParamSet) -> (Vec<GroupEntry>, Vec<u8>) {
    let mut entries = Vec::with_capacity(params.group_count());
    let mut bytes = Vec::with_capacity(params.scalar_count() * 8);
    for (name, t) in params.iter() {
        entries.push(GroupEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: bytes.len() as u64,
            count: t.len() as u64,
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    (entries, bytes)
}

/// Rebuilds parameters from manifest entries and payload bytes, reporting the
/// byte offset of the first inconsistency.
pub fn decode(groups: &[GroupEntry], total_bytes: u64, bytes: &[u8]) -> Result<ParamSet> {
    let mut params = ParamSet::new();
    let mut expected = 0u64;
    for g in groups {
        if g.offset != expected {
            return Err(RoseError::Corrupt {
                offset: expected,
                detail: format!("group `{}` declares offset {}", g.name, g.offset),
            });
        }
        let elements: usize = g.shape.iter().product();
        if elements as u64 != g.count || g.shape.is_empty() {
            return Err(RoseError::Corrupt {
                offset: g.offset,
                detail: format!(
                    "group `{}` shape {:?} does not hold {} elements",
                    g.name, g.shape, g.count
                ),
            });
        }
        let end = g.offset + 8 * g.count;
        if end > bytes.len() as u64 {
            return Err(RoseError::Corrupt {
                offset: bytes.len() as u64,
                detail: format!("payload ends inside group `{}` (needs {end} bytes)", g.name),
            });
        }
        let data = bytes[g.offset as usize..end as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let tensor = Tensor::new(g.shape.clone(), data).map_err(|e| RoseError::Corrupt {
            offset: g.offset,
            detail: e.to_string(),
        })?;
        params
            .insert(g.name.clone(), tensor)
            .map_err(|e| RoseError::Corrupt {
                offset: g.offset,
                detail: e.to_string(),
            })?;
        expected = end;
    }
    if expected != total_bytes || bytes.len() as u64 != total_bytes {
        return Err(RoseError::Corrupt {
            offset: expected.min(bytes.len() as u64),
            detail: format!(
                "manifest covers {expected} bytes, declares {total_bytes}, payload has {}",
                bytes.len()
            ),
        });
    }
    Ok(params)
}

impl Checkpoint {
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let (groups, bytes) = encode(&self.params);
        let data_path = payload_path(manifest_path);
        let data_file = data_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| RoseError::config("checkpoint path has no file name"))?
            .to_string();
        let manifest = Manifest {
            format: FORMAT.to_string(),
            step: self.step,
            data_file,
            total_bytes: bytes.len() as u64,
            groups,
            config: self.config.clone(),
        };
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        std::fs::write(manifest_path, json)?;
        std::fs::write(data_path, bytes)?;
        Ok(())
    }

    pub fn load(manifest_path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(manifest_path)?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| RoseError::Corrupt {
            offset: 0,
            detail: format!("manifest: {e}"),
        })?;
        if manifest.format != FORMAT {
            return Err(RoseError::Corrupt {
                offset: 0,
                detail: format!("unknown format `{}`", manifest.format),
            });
        }
        let data_path = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.data_file);
        let bytes = std::fs::read(&data_path)?;
        let params = decode(&manifest.groups, manifest.total_bytes, &bytes)?;
        manifest
            .config
            .model
            .check_params(&params)
            .map_err(|e| RoseError::Corrupt {
                offset: 0,
                detail: e.to_string(),
            })?;
        Ok(Checkpoint {
            params,
            step: manifest.step,
            config: manifest.config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(
            "a.weight",
            Tensor::new(vec![2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e308]).unwrap(),
        )
        .unwrap();
        p.insert(
            "a.bias",
            Tensor::new(vec![2], vec![1.0 / 3.0, -7.5]).unwrap(),
        )
        .unwrap();
        p
    }

    #[test]
    fn encode_decode_is_bit_exact() {
        let p = params();
        let (groups, bytes) = encode(&p);
        assert_eq!(groups[1].offset, 32);
        let back = decode(&groups, bytes.len() as u64, &bytes).unwrap();
        for (a, b) in p.flatten().iter().zip(back.flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let (groups, bytes) = encode(&params());
        let err = decode(&groups, bytes.len() as u64, &bytes[..40]).unwrap_err();
        match err {
            RoseError::Corrupt { offset, .. } => assert_eq!(offset, 40),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gap_in_offsets_reported() {
        let (mut groups, bytes) = encode(&params());
        groups[1].offset = 40;
        match decode(&groups, bytes.len() as u64, &bytes).unwrap_err() {
            RoseError::Corrupt { offset, .. } => assert_eq!(offset, 32),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_reported() {
        let (groups, mut bytes) = encode(&params());
        let len = bytes.len() as u64;
        bytes.extend_from_slice(&[0; 8]);
        match decode(&groups, len, &bytes).unwrap_err() {
            RoseError::Corrupt { offset, .. } => assert_eq!(offset, len),
            other => panic!("unexpected {other:?}"),
        }
    }
}
