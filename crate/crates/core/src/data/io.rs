//! Dataset directory layout:
//!
//! ```text
//! manifest.json   format version, seed, counts, blob list
//! pairs.jsonl     one caption pair per line
//! t2m.jsonl       one instruction-wrapped pair per line
//! mosit.jsonl     one dialogue per line
//! blobs/*.blob    payload tensors
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blob::Blob;
use crate::config::{EncoderConfig, Modality};
use crate::data::synth::{gen_caption_pairs, gen_mosit_dialogues, wrap_t2m, CaptionPair, Dialogue, T2M_TEMPLATES};
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub pairs: usize,
    pub t2m: usize,
    pub mosit: usize,
    pub blobs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub pairs: Vec<CaptionPair>,
    pub t2m: Vec<Dialogue>,
    pub mosit: Vec<Dialogue>,
    pub blobs: BTreeMap<String, Blob>,
}

impl Dataset {
    /// `pairs_per_modality` caption pairs for each non-text modality, each
    /// also wrapped as an instruction pair, plus `dialogues` modality-switching
    /// dialogues.
    pub fn generate(seed: u64, pairs_per_modality: usize, dialogues: usize, cfg: &EncoderConfig) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut blobs = BTreeMap::new();
        for m in Modality::NON_TEXT {
            let (p, b) = gen_caption_pairs(m, pairs_per_modality, seed, cfg)?;
            pairs.extend(p);
            blobs.extend(b);
        }
        let t2m = pairs
            .iter()
            .enumerate()
            .map(|(i, p)| wrap_t2m(p, i % T2M_TEMPLATES[0].len(), seed))
            .collect::<Result<Vec<_>>>()?;
        let mosit = if dialogues == 0 {
            Vec::new()
        } else {
            let (d, b) = gen_mosit_dialogues(dialogues, seed, cfg)?;
            blobs.extend(b);
            d
        };
        Ok(Self { seed, pairs, t2m, mosit, blobs })
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            format_version: DATASET_FORMAT_VERSION,
            seed: self.seed,
            pairs: self.pairs.len(),
            t2m: self.t2m.len(),
            mosit: self.mosit.len(),
            blobs: self.blobs.keys().cloned().collect(),
        }
    }

    pub fn pairs_of(&self, modality: Modality) -> impl Iterator<Item = &CaptionPair> {
        self.pairs.iter().filter(move |p| p.item.modality == modality)
    }

    /// Every blob path any record points at.
    fn referenced_blobs(&self) -> BTreeSet<&str> {
        let mut refs: BTreeSet<&str> = self.pairs.iter().map(|p| p.item.blob.as_str()).collect();
        for d in self.t2m.iter().chain(&self.mosit) {
            for m in &d.messages {
                if let Some(a) = &m.attachment {
                    refs.insert(a.blob.as_str());
                }
            }
        }
        refs
    }

    /// Dialogue schema plus referential integrity.
    pub fn validate(&self) -> Result<()> {
        for d in self.t2m.iter().chain(&self.mosit) {
            d.validate()?;
        }
        for r in self.referenced_blobs() {
            if !self.blobs.contains_key(r) {
                return Err(Error::DanglingRef(format!("record points at missing payload {r}")));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir.join("blobs")).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("manifest.json"), &self.manifest())?;
        write_jsonl(&dir.join("pairs.jsonl"), &self.pairs)?;
        write_jsonl(&dir.join("t2m.jsonl"), &self.t2m)?;
        write_jsonl(&dir.join("mosit.jsonl"), &self.mosit)?;
        for (name, blob) in &self.blobs {
            blob.write(&dir.join(name))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Version { found: manifest.format_version, expected: DATASET_FORMAT_VERSION });
        }
        let pairs: Vec<CaptionPair> = read_jsonl(&dir.join("pairs.jsonl"))?;
        let t2m: Vec<Dialogue> = read_jsonl(&dir.join("t2m.jsonl"))?;
        let mosit: Vec<Dialogue> = read_jsonl(&dir.join("mosit.jsonl"))?;
        for (what, got, want) in [("pairs", pairs.len(), manifest.pairs), ("t2m", t2m.len(), manifest.t2m), ("mosit", mosit.len(), manifest.mosit)] {
            if got != want {
                return Err(Error::InvalidInput(format!("manifest lists {want} {what} records, found {got}")));
            }
        }
        let mut blobs = BTreeMap::new();
        for name in &manifest.blobs {
            let p = dir.join(name);
            if !p.exists() {
                return Err(Error::DanglingRef(format!("manifest lists {name} but the file is missing")));
            }
            blobs.insert(name.clone(), Blob::read(&p)?);
        }
        let ds = Self { seed: manifest.seed, pairs, t2m, mosit, blobs };
        ds.validate()?;
        Ok(ds)
    }
}

/// SHA-256 over the manifest, record files and blobs in sorted order.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let mut files = vec!["manifest.json".to_string(), "pairs.jsonl".into(), "t2m.jsonl".into(), "mosit.jsonl".into()];
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    files.extend(manifest.blobs);
    let mut h = Sha256::new();
    for f in files {
        let p = dir.join(&f);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        h.update(f.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parse one record per non-empty line; errors carry the 1-based line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                file: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
