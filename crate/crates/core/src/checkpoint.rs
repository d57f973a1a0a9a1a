//! Checkpoints: a JSON manifest plus one little-endian `f64` blob per tensor.
//!
//! The manifest lists every tensor with its group, shape, blob file and
//! SHA-256, so the SHA-256 of the manifest bytes identifies the whole
//! checkpoint.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::nn::{Group, Stage};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub stage: Stage,
    pub seed: u64,
    pub config_hash: String,
    pub steps: usize,
    pub groups: Vec<Group>,
    pub tensors: Vec<TensorEntry>,
}

fn blob_name(index: usize, name: &str) -> String {
    format!("{index:03}-{name}.bin")
}

type Blob = (TensorEntry, Vec<u8>);

fn build(params: &ModelParams, cfg: &RunConfig, stage: Stage, steps: usize) -> Result<(Vec<u8>, Vec<Blob>)> {
    let mut named: Vec<(String, Group, &crate::tensor::Tensor)> = params
        .store
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.group, &e.value))
        .collect();
    named.extend(
        params
            .encoders
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, Group::Encoders, t)),
    );
    let mut blobs = Vec::with_capacity(named.len());
    for (i, (name, group, t)) in named.into_iter().enumerate() {
        let bytes = t.to_le_bytes();
        let entry = TensorEntry {
            file: blob_name(i, &name),
            name,
            group,
            shape: t.shape().to_vec(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        };
        blobs.push((entry, bytes));
    }
    let manifest = Manifest {
        format: FORMAT,
        stage,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        steps,
        groups: Group::ALL.to_vec(),
        tensors: blobs.iter().map(|(e, _)| e.clone()).collect(),
    };
    Ok((serde_json::to_vec_pretty(&manifest)?, blobs))
}

/// Hash [`save`] would return, without touching the filesystem.
pub fn fingerprint(params: &ModelParams, cfg: &RunConfig, stage: Stage, steps: usize) -> Result<String> {
    let (json, _) = build(params, cfg, stage, steps)?;
    Ok(hex::encode(Sha256::digest(json)))
}

/// Writes `dir/manifest.json` and the blobs; returns the checkpoint hash.
pub fn save(dir: &Path, params: &ModelParams, cfg: &RunConfig, stage: Stage, steps: usize) -> Result<String> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (json, blobs) = build(params, cfg, stage, steps)?;
    for (entry, bytes) in &blobs {
        let path = dir.join(&entry.file);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, &json).map_err(|e| Error::io(&path, e))?;
    Ok(hex::encode(Sha256::digest(&json)))
}

/// SHA-256 of an existing checkpoint's manifest.
pub fn hash(dir: &Path) -> Result<String> {
    let path = dir.join(MANIFEST);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data {
        path,
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Loads trained tensors into parameters built from `cfg`. Encoder blobs
/// must match the encoders `cfg` generates.
pub fn load(dir: &Path, cfg: &RunConfig) -> Result<ModelParams> {
    let manifest = read_manifest(dir)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported format {}",
            manifest.format
        )));
    }
    let mut params = cfg.init_params()?;
    let encoders: Vec<(String, crate::tensor::Tensor)> = params
        .encoders
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    for entry in &manifest.tensors {
        let path = dir.join(&entry.file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
            return Err(Error::Checkpoint(format!("{} fails its checksum", entry.file)));
        }
        let value = crate::tensor::Tensor::from_le_bytes(entry.shape.clone(), &bytes)?;
        if entry.group == Group::Encoders {
            let expected = encoders.iter().find(|(n, _)| *n == entry.name);
            if expected.map(|(_, t)| t) != Some(&value) {
                return Err(Error::Checkpoint(format!(
                    "encoder tensor {} does not match the configured seed",
                    entry.name
                )));
            }
            continue;
        }
        let id = params
            .store
            .find(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", entry.name)))?;
        let slot = params.store.get_mut(id);
        if slot.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?} in checkpoint, {:?} in config",
                entry.name,
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_stable_hash() {
        let cfg = RunConfig::desk();
        let params = cfg.init_params().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let h1 = save(&dir.path().join("a"), &params, &cfg, Stage::Finetune, 0).unwrap();
        let h2 = save(&dir.path().join("b"), &params, &cfg, Stage::Finetune, 0).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(hash(&dir.path().join("a")).unwrap(), h1);
        assert_eq!(fingerprint(&params, &cfg, Stage::Finetune, 0).unwrap(), h1);
        let back = load(&dir.path().join("a"), &cfg).unwrap();
        assert_eq!(back, params);
        let m = read_manifest(&dir.path().join("a")).unwrap();
        assert!(m.tensors.iter().any(|t| t.group == Group::Encoders));
    }

    #[test]
    fn tampered_blob_detected() {
        let cfg = RunConfig::desk();
        let params = cfg.init_params().unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &params, &cfg, Stage::Pretrain, 0).unwrap();
        let m = read_manifest(dir.path()).unwrap();
        let victim = dir.path().join(&m.tensors[0].file);
        let mut bytes = std::fs::read(&victim).unwrap();
        bytes[0] ^= 1;
        std::fs::write(&victim, bytes).unwrap();
        assert!(matches!(load(dir.path(), &cfg), Err(Error::Checkpoint(_))));
    }
}
