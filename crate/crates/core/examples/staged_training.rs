//! The whole training path through the library: pretraining of the stand-in
//! components, then the three alignment stages, each followed by its own
//! held-in measurement. `--quick` shrinks every budget to a smoke run.

use candle_core::DType;
use nxgpt::config::ModelConfig;
use nxgpt::data::io::Dataset;
use nxgpt::diffusion::BackboneRecipe;
use nxgpt::error::Result;
use nxgpt::model::NxModel;
use nxgpt::train::eval::{caption_ce, dialogue_metrics, signal_metrics};
use nxgpt::train::pretrain::{pretrain_backbones, pretrain_llm};
use nxgpt::train::{run_stage, PretrainRecipe, StageRecipe};

fn main() -> Result<()> {
    let quick = std::env::args().any(|a| a == "--quick");
    let cfg = ModelConfig::desk();
    let (pairs, dialogues) = if quick { (2, 4) } else { (11, 31) };
    let ds = Dataset::generate(7, pairs, dialogues, &cfg.encoder)?;
    println!("data: {} caption pairs, {} dialogues", ds.pairs.len(), ds.t2m.len() + ds.mosit.len());

    let mut model = NxModel::new(&cfg, DType::F32)?;
    let mut pre = PretrainRecipe::default();
    let mut backbone = BackboneRecipe::default();
    if quick {
        pre.steps = 10;
        backbone.steps = 10;
    }
    let losses = pretrain_llm(&mut model, &ds, &pre, 7)?;
    println!("pretrain llm: loss {:.3} -> {:.3}", losses[0], losses[losses.len() - 1]);
    let curves = pretrain_backbones(&mut model, &ds, backbone, 7)?;
    for (m, c) in &curves {
        println!("pretrain {m} decoder: loss {:.3} -> {:.3}", c[0], c[c.len() - 1]);
    }

    let caption_pairs: Vec<_> = ds.pairs.iter().collect();
    let all_dialogues: Vec<_> = ds.t2m.iter().chain(&ds.mosit).collect();
    for stage in 1..=3u8 {
        let mut recipe = StageRecipe::desk(stage)?;
        if quick {
            recipe.steps = Some(3);
        }
        let report = run_stage(&mut model, stage, &recipe, &ds, 7, None)?;
        let last = report.last().expect("at least one step");
        println!("stage {stage}: {} steps, final loss {:.4}", report.steps, last.loss.total);
        match stage {
            1 => println!("  caption CE {:.4} nats/token", caption_ce(&model, &caption_pairs, &ds.blobs)?),
            2 => {
                let s = signal_metrics(&model, &caption_pairs)?;
                println!("  mean cosine {:.3}, signal accuracy {:.3}", s.mean_cosine, s.signal_accuracy);
            }
            _ => {
                let d = dialogue_metrics(&model, &all_dialogues, &ds.blobs, true)?;
                println!(
                    "  emission {:.3}, activation match {:.3}, decoder calls {:?}",
                    d.emission_accuracy, d.activation_exact_match, d.decoder_calls
                );
            }
        }
    }
    Ok(())
}
