//! Saves a model, reloads it, and compares tensor bytes and directory hashes.

use candle_core::DType;
use nxgpt::checkpoint::{checkpoint_hash, load_checkpoint, save_checkpoint};
use nxgpt::config::ModelConfig;
use nxgpt::error::{Error, Result};
use nxgpt::model::NxModel;

fn main() -> Result<()> {
    let model = NxModel::new(&ModelConfig::desk(), DType::F32)?;
    let base = std::env::temp_dir().join(format!("nxgpt-example-ckpt-{}", std::process::id()));
    let (a, b) = (base.join("a"), base.join("b"));
    let manifest = save_checkpoint(&model, &a)?;
    println!("saved {} tensors to {}", manifest.tensors.len(), a.display());
    for t in manifest.tensors.iter().take(4) {
        println!("  {} {:?} ({})", t.name, t.shape, t.role);
    }
    let reloaded = load_checkpoint(&a)?;
    let same = model.store.snapshot()? == reloaded.store.snapshot()?;
    println!("reloaded tensors byte-identical: {same}");
    save_checkpoint(&reloaded, &b)?;
    println!("hash a {}\nhash b {}", checkpoint_hash(&a)?, checkpoint_hash(&b)?);
    std::fs::remove_dir_all(&base).map_err(|e| Error::io(&base, e))?;
    Ok(())
}
