//! Checkpoint directories: `manifest.json` plus one blob per tensor under
//! `tensors/`. Tensors are stored as float32 regardless of the store dtype.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blob::Blob;
use crate::budget::Role;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{NxModel, Provenance};
use crate::params::module_of;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub module: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub role: Role,
    pub blob: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub provenance: Provenance,
    pub tensors: Vec<TensorRecord>,
}

impl CheckpointManifest {
    pub fn of(model: &NxModel) -> Self {
        let tensors = model
            .store
            .entries()
            .map(|(name, e)| TensorRecord {
                name: name.clone(),
                module: module_of(name),
                shape: e.param.shape(),
                dtype: "float32".into(),
                role: e.role,
                blob: format!("tensors/{name}.blob"),
            })
            .collect();
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: model.cfg.clone(),
            provenance: model.provenance.clone(),
            tensors,
        }
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::CorruptCheckpoint(format!("{}: {e}", path.display())))?;
        let found = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Version { found, expected: CHECKPOINT_FORMAT_VERSION });
        }
        serde_json::from_value(raw).map_err(|e| Error::CorruptCheckpoint(format!("{}: {e}", path.display())))
    }
}

pub fn save_checkpoint(model: &NxModel, dir: &Path) -> Result<CheckpointManifest> {
    let manifest = CheckpointManifest::of(model);
    fs::create_dir_all(dir.join("tensors")).map_err(|e| Error::io(dir, e))?;
    for rec in &manifest.tensors {
        let data = model.store.values_f32(&rec.name)?;
        Blob::new(rec.shape.clone(), data)?.write(&dir.join(&rec.blob))?;
    }
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Overwrite `model`'s tensors and provenance from `dir`. Every tensor of the
/// model must be present with its exact shape.
pub fn load_into(model: &mut NxModel, dir: &Path) -> Result<CheckpointManifest> {
    let manifest = CheckpointManifest::read(dir)?;
    let mut seen = std::collections::BTreeSet::new();
    for rec in &manifest.tensors {
        if !seen.insert(rec.name.as_str()) {
            return Err(Error::CorruptCheckpoint(format!("tensor {} listed twice", rec.name)));
        }
        let entry = model.store.get(&rec.name).ok_or_else(|| Error::ShapeMismatch {
            name: rec.name.clone(),
            detail: "not a tensor of the target configuration".into(),
        })?;
        if entry.param.shape() != rec.shape {
            return Err(Error::ShapeMismatch {
                name: rec.name.clone(),
                detail: format!("manifest has {:?}, model has {:?}", rec.shape, entry.param.shape()),
            });
        }
        let blob = Blob::read(&dir.join(&rec.blob))?;
        if blob.shape != rec.shape {
            return Err(Error::CorruptCheckpoint(format!(
                "{} blob has shape {:?}, manifest says {:?}",
                rec.blob, blob.shape, rec.shape
            )));
        }
        model.store.set_values_f32(&rec.name, &rec.shape, blob.data)?;
    }
    if let Some(missing) = model.store.names().find(|n| !seen.contains(n.as_str())) {
        return Err(Error::CorruptCheckpoint(format!("tensor {missing} is missing")));
    }
    model.set_provenance(manifest.provenance.clone());
    Ok(manifest)
}

/// Rebuild a model from the config stored in `dir`, then load its tensors.
pub fn load_checkpoint(dir: &Path) -> Result<NxModel> {
    let manifest = CheckpointManifest::read(dir)?;
    let mut model = NxModel::new(&manifest.config, candle_core::DType::F32)?;
    load_into(&mut model, dir)?;
    Ok(model)
}

/// Copy every tensor accepted by `keep` that exists with the same shape in
/// both models, and the provenance. Returns the number of tensors copied.
pub fn transplant(src: &NxModel, dst: &mut NxModel, keep: impl Fn(&str) -> bool) -> Result<usize> {
    let mut copied = 0;
    for (name, entry) in src.store.entries() {
        if !keep(name) {
            continue;
        }
        let shape = entry.param.shape();
        match dst.store.get(name) {
            Some(d) if d.param.shape() == shape => {
                dst.store.set_values_f32(name, &shape, src.store.values_f32(name)?)?;
                copied += 1;
            }
            _ => {}
        }
    }
    dst.set_provenance(src.provenance.clone());
    Ok(copied)
}

/// SHA-256 over the manifest and every blob, in manifest order.
pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    let manifest = CheckpointManifest::read(dir)?;
    let mut h = Sha256::new();
    let mut files = vec![MANIFEST.to_string()];
    files.extend(manifest.tensors.into_iter().map(|t| t.blob));
    for f in files {
        let p = dir.join(&f);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        h.update(f.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    fn tmp(name: &str) -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("nxgpt-ckpt-{name}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&d);
        d
    }

    fn small_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.llm.layers = 1;
        cfg
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tmp("rt");
        let mut m = NxModel::new(&small_cfg(), DType::F32).unwrap();
        m.mark_backbone(crate::config::Modality::Audio);
        m.provenance.stages.push(1);
        save_checkpoint(&m, &dir).unwrap();
        let back = load_checkpoint(&dir).unwrap();
        assert_eq!(back.store.snapshot().unwrap(), m.store.snapshot().unwrap());
        assert_eq!(back.provenance, m.provenance);
        assert!(back.denoisers[&crate::config::Modality::Audio].trained);
        assert!(!back.denoisers[&crate::config::Modality::Image].trained);
        for (name, e) in m.store.entries() {
            assert_eq!(back.store.get(name).unwrap().role, e.role);
        }
        let dir2 = tmp("rt2");
        save_checkpoint(&back, &dir2).unwrap();
        assert_eq!(checkpoint_hash(&dir).unwrap(), checkpoint_hash(&dir2).unwrap());
    }

    #[test]
    fn truncated_blob_is_corrupt() {
        let dir = tmp("trunc");
        let m = NxModel::new(&small_cfg(), DType::F32).unwrap();
        let manifest = save_checkpoint(&m, &dir).unwrap();
        let p = dir.join(&manifest.tensors[0].blob);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_checkpoint(&dir), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn foreign_tensor_is_a_shape_mismatch() {
        let dir = tmp("foreign");
        let m = NxModel::new(&small_cfg(), DType::F32).unwrap();
        save_checkpoint(&m, &dir).unwrap();
        let mut target = NxModel::new(&ModelConfig::desk(), DType::F32).unwrap();
        let mut manifest = CheckpointManifest::read(&dir).unwrap();
        manifest.tensors[0].name = "llm.base.layer9.extra".into();
        fs::write(dir.join(MANIFEST), serde_json::to_string(&manifest).unwrap()).unwrap();
        assert!(matches!(load_into(&mut target, &dir), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tmp("version");
        let m = NxModel::new(&small_cfg(), DType::F32).unwrap();
        save_checkpoint(&m, &dir).unwrap();
        let mut manifest = CheckpointManifest::read(&dir).unwrap();
        manifest.format_version = 7;
        fs::write(dir.join(MANIFEST), serde_json::to_string(&manifest).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(&dir), Err(Error::Version { found: 7, expected: 1 })));
    }
}
