//! Checkpoint directory: `manifest.json` (format version, config echo,
//! parameter layout, step count) and `params.bin` (little-endian `f32`
//! tensors concatenated in manifest order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams, ParamTensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    tool_version: String,
    model: ModelConfig,
    step: u64,
    #[serde(default)]
    extra: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub step: u64,
    pub extra: serde_json::Value,
}

pub fn save_checkpoint(dir: &Path, params: &ModelParams<f32>, step: u64, extra: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        model: params.config().clone(),
        step,
        extra,
        tensors: params
            .tensors()
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let mut payload = Vec::with_capacity(params.parameter_count() * 4);
    for t in params.tensors() {
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mpath = dir.join("manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(|e| Error::io(&mpath, e))?;
    let ppath = dir.join("params.bin");
    fs::write(&ppath, payload).map_err(|e| Error::io(&ppath, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", mpath.display())))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} unsupported (expected {CHECKPOINT_VERSION})",
            manifest.format_version
        )));
    }
    let ppath = dir.join("params.bin");
    let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let expected: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if bytes.len() != expected * 4 {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes, manifest needs {}",
            bytes.len(),
            expected * 4
        )));
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let tensors = manifest
        .tensors
        .into_iter()
        .map(|t| {
            let n = t.shape.iter().product();
            ParamTensor {
                name: t.name,
                shape: t.shape,
                data: values.by_ref().take(n).collect(),
            }
        })
        .collect();
    Ok(Checkpoint {
        params: ModelParams::from_parts(manifest.model, tensors)?,
        step: manifest.step,
        extra: manifest.extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut cfg = ModelConfig::new(4);
        cfg.channels = vec![3, 5, 6];
        cfg.seed = 42;
        let p = init_model(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &p, 17, serde_json::json!({"epoch": 3})).unwrap();
        let ck = load_checkpoint(dir.path()).unwrap();
        assert_eq!(ck.step, 17);
        assert_eq!(ck.extra["epoch"], 3);
        for (a, b) in p.tensors().iter().zip(ck.params.tensors()) {
            assert_eq!(a.name, b.name);
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut cfg = ModelConfig::new(2);
        cfg.depth = 1;
        cfg.channels = vec![2];
        let p = init_model(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &p, 0, serde_json::Value::Null).unwrap();
        let pp = dir.path().join("params.bin");
        let mut b = fs::read(&pp).unwrap();
        b.pop();
        fs::write(&pp, b).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
    }
}
