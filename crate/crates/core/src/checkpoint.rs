//! The STLR1 on-disk format: a directory holding `manifest.json` and
//! `params.bin`.
//!
//! `params.bin` is every tensor as little-endian `f32`, concatenated in
//! manifest order. The manifest records the format tag, a free-form `meta`
//! object (model config, judge type, ...) and one entry per tensor with its
//! group, shape, dtype and byte offset. Adapter sidecars use the same layout
//! with the `STLR1-A` tag. Resumable training state is written as `f64` so
//! optimizer moments survive exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::params::{NamedTensor, ParameterGroup};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const FORMAT_MODEL: &str = "STLR1";
pub const FORMAT_ADAPTER: &str = "STLR1-A";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: ParameterGroup,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

pub fn write_checkpoint(
    dir: &Path,
    format: &str,
    meta: serde_json::Value,
    tensors: &[NamedTensor],
) -> Result<()> {
    write_checkpoint_as(dir, format, meta, tensors, Dtype::F32)
}

pub fn write_checkpoint_as(
    dir: &Path,
    format: &str,
    meta: serde_json::Value,
    tensors: &[NamedTensor],
    dtype: Dtype,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bin = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for t in tensors {
        entries.push(TensorEntry {
            name: t.name.clone(),
            group: t.group,
            shape: t.tensor.shape().to_vec(),
            dtype: dtype.as_str().into(),
            offset: bin.len() as u64,
        });
        for v in t.tensor.data() {
            match dtype {
                Dtype::F32 => bin.extend_from_slice(&(*v as f32).to_le_bytes()),
                Dtype::F64 => bin.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    let manifest = Manifest {
        format: format.into(),
        version: FORMAT_VERSION,
        meta,
        tensors: entries,
    };
    let bin_path = dir.join("params.bin");
    fs::write(&bin_path, &bin).map_err(|e| Error::io(&bin_path, e))?;
    let man_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&man_path, text + "\n").map_err(|e| Error::io(&man_path, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let man_path = dir.join("manifest.json");
    let text = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_checkpoint(dir: &Path, expect_format: &str) -> Result<(Manifest, Vec<NamedTensor>)> {
    let manifest = read_manifest(dir)?;
    if manifest.format != expect_format {
        return Err(Error::Data(format!(
            "{}: expected format {expect_format}, found {}",
            dir.display(),
            manifest.format
        )));
    }
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported format version {}",
            dir.display(),
            manifest.version
        )));
    }
    let bin_path = dir.join("params.bin");
    let bin = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let width = match e.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::Data(format!("tensor {}: unsupported dtype {other}", e.name))),
        };
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + width * n;
        if end > bin.len() {
            return Err(Error::Data(format!(
                "tensor {} runs past the end of params.bin",
                e.name
            )));
        }
        let data = if width == 4 {
            bin[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        } else {
            bin[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        tensors.push(NamedTensor {
            name: e.name.clone(),
            group: e.group,
            tensor: Tensor::from_vec(&e.shape, data),
        });
    }
    Ok((manifest, tensors))
}

/// SHA-256 over manifest and weights, hex encoded.
pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for f in ["manifest.json", "params.bin"] {
        let p = dir.join(f);
        h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn bytes_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_are_cumulative_and_values_survive() {
        let dir = tempfile::tempdir().unwrap();
        let tensors = vec![
            NamedTensor {
                name: "a".into(),
                group: ParameterGroup::Encoder,
                tensor: Tensor::from_vec(&[2, 2], vec![1.0, -2.5, 0.125, 3.0]),
            },
            NamedTensor {
                name: "b".into(),
                group: ParameterGroup::Adapter,
                tensor: Tensor::from_vec(&[3], vec![0.5, 0.25, -1.0]),
            },
        ];
        write_checkpoint(dir.path(), FORMAT_MODEL, serde_json::json!({"k": 1}), &tensors).unwrap();
        let (m, back) = read_checkpoint(dir.path(), FORMAT_MODEL).unwrap();
        assert_eq!(m.tensors[1].offset, 16);
        assert_eq!(back, tensors);
        assert_eq!(std::fs::metadata(dir.path().join("params.bin")).unwrap().len(), 28);
        assert!(read_checkpoint(dir.path(), FORMAT_ADAPTER).is_err());
    }

    #[test]
    fn params_bin_is_little_endian_f32() {
        let dir = tempfile::tempdir().unwrap();
        let tensors = vec![NamedTensor {
            name: "w".into(),
            group: ParameterGroup::LmHead,
            tensor: Tensor::from_vec(&[1], vec![1.0]),
        }];
        write_checkpoint(dir.path(), FORMAT_MODEL, serde_json::Value::Null, &tensors).unwrap();
        let bytes = std::fs::read(dir.path().join("params.bin")).unwrap();
        assert_eq!(bytes, 1.0f32.to_le_bytes());
    }

    #[test]
    fn f64_state_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let tensors = vec![NamedTensor {
            name: "m".into(),
            group: ParameterGroup::Adapter,
            tensor: Tensor::from_vec(&[2], vec![0.1, 1.0 / 3.0]),
        }];
        write_checkpoint_as(dir.path(), "state", serde_json::Value::Null, &tensors, Dtype::F64).unwrap();
        let (_, back) = read_checkpoint(dir.path(), "state").unwrap();
        assert_eq!(back, tensors);
    }
}
