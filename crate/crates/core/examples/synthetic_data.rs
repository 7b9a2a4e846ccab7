//! Generates a small synthetic dataset, prints one caption pair, one
//! instruction pair and one modality-switching dialogue, then saves it.

use nxgpt::chat::{render_dialogue, AttachmentMode, RenderOptions};
use nxgpt::config::ModelConfig;
use nxgpt::data::io::{dataset_hash, Dataset};
use nxgpt::error::Result;
use nxgpt::model::NxModel;

fn main() -> Result<()> {
    let cfg = ModelConfig::desk();
    let ds = Dataset::generate(5, 4, 3, &cfg.encoder)?;
    ds.validate()?;
    let p = &ds.pairs[0];
    println!("caption pair {}: {} -> {:?}", p.id, p.item.modality, p.item.caption);

    let model = NxModel::new(&cfg, candle_core::DType::F32)?;
    let opts = RenderOptions { attachments: AttachmentMode::Gist(model.concept_len()), runs: true };
    for d in [&ds.t2m[0], &ds.mosit[0]] {
        let r = render_dialogue(d, &model.vocab, opts)?;
        println!("\n{} ({}, {} turns, {} tokens):", d.id, d.topic, d.turn_count(), r.len());
        for m in &d.messages {
            let att = m.attachment.as_ref().map(|a| format!(" [{}: {}]", a.modality, a.caption)).unwrap_or_default();
            println!("  {:?}: {}{att}", m.speaker, m.text);
        }
    }

    let dir = std::env::temp_dir().join(format!("nxgpt-example-data-{}", std::process::id()));
    ds.save(&dir)?;
    println!("\nsaved to {} (hash {})", dir.display(), dataset_hash(&dir)?);
    let back = Dataset::load(&dir)?;
    println!("reloaded {} pairs, {} dialogues", back.pairs.len(), back.t2m.len() + back.mosit.len());
    std::fs::remove_dir_all(&dir).map_err(|e| nxgpt::error::Error::io(&dir, e))?;
    Ok(())
}
