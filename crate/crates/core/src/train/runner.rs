//! Runs one alignment stage end to end: prerequisite checks, deterministic
//! batch order, Adam with warmup and linear decay, and a per-step metrics log.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::chat::{render_dialogue, AttachmentMode, RenderOptions};
use crate::data::io::Dataset;
use crate::error::{Error, Result};
use crate::grouping::Mode;
use crate::llm::trainable_mask;
use crate::model::NxModel;
use crate::params::Ctx;
use crate::train::losses::{stage1_step, stage2_step, stage3_step, LossBreakdown, LossWeights};
use crate::train::optim::{lr_at, Adam};
use crate::train::recipe::StageRecipe;
use crate::util::derived_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub stage: u8,
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    pub steps: usize,
    pub metrics: Vec<StepMetrics>,
}

impl StageReport {
    pub fn last(&self) -> Option<&StepMetrics> {
        self.metrics.last()
    }
}

/// One epoch of batches over `lengths.len()` examples: shuffle, sort by
/// length, cut into batches, shuffle the batch order. Padding within a batch
/// stays small. The last batch may be short.
pub fn bucketed_batches(lengths: &[usize], batch: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    idx.shuffle(rng);
    idx.sort_by_key(|&i| lengths[i]);
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

/// Stage `n` needs stage `n - 1`; stage 1 needs the pretrained LLM; stage 2
/// also needs every diffusion backbone.
pub fn check_prerequisites(model: &NxModel, stage: u8) -> Result<()> {
    let p = &model.provenance;
    match stage {
        1 if !p.llm_pretrained => Err(Error::Dependency(
            "stage 1 needs a pretrained language model; run `nxgpt pretrain` first".into(),
        )),
        1 => Ok(()),
        2 | 3 if !p.stages.contains(&(stage - 1)) => Err(Error::Dependency(format!(
            "stage {stage} needs a stage-{} checkpoint; pass it with --resume",
            stage - 1
        ))),
        2 => {
            let missing: Vec<String> = crate::config::Modality::NON_TEXT
                .iter()
                .filter(|m| !p.backbones.contains(m))
                .map(|m| m.to_string())
                .collect();
            if missing.is_empty() {
                Ok(())
            } else {
                Err(Error::Dependency(format!(
                    "stage 2 needs pretrained diffusion decoders for {}; run `nxgpt pretrain` first",
                    missing.join(", ")
                )))
            }
        }
        3 => Ok(()),
        other => Err(Error::UnknownStage(other)),
    }
}

/// Train `stage` in place. Each step's metrics are written as one JSON line
/// to `log` when given.
pub fn run_stage(
    model: &mut NxModel,
    stage: u8,
    recipe: &StageRecipe,
    ds: &Dataset,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<StageReport> {
    recipe.validate()?;
    if recipe.stage != stage {
        return Err(Error::Config(format!("recipe is for stage {}, not {stage}", recipe.stage)));
    }
    check_prerequisites(model, stage)?;
    let n = match stage {
        1 | 2 => ds.pairs.len(),
        _ => ds.t2m.len() + ds.mosit.len(),
    };
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let dialogues: Vec<_> = ds.t2m.iter().chain(&ds.mosit).collect();
    let total = recipe.total_steps(n);
    let mask: BTreeSet<String> = trainable_mask(&model.store, stage)?;
    let weights = LossWeights::of(recipe);
    let mut adam = Adam::new(recipe.weight_decay);
    let mut order_rng = derived_rng(seed, &format!("stage{stage}.order"));
    // Dialogues vary in length by an order of magnitude; bucket them.
    let lengths: Vec<usize> = match stage {
        1 | 2 => vec![0; n],
        _ => {
            let opts = RenderOptions { attachments: AttachmentMode::Concepts(model.concept_len()), runs: true };
            dialogues
                .iter()
                .map(|d| Ok(render_dialogue(d, &model.vocab, opts)?.len()))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut metrics = Vec::with_capacity(total);
    for step in 0..total {
        if queue.is_empty() {
            queue = bucketed_batches(&lengths, recipe.batch_size, &mut order_rng);
        }
        let idx = queue.pop().expect("refilled above");
        let ctx = Ctx::train(&mask, seed ^ (step as u64).wrapping_mul(0x9e37_79b9));
        let mut rng = derived_rng(seed, &format!("stage{stage}.step{step}"));
        let out = match stage {
            1 => {
                let batch: Vec<_> = idx.iter().map(|&i| &ds.pairs[i]).collect();
                stage1_step(model, &ctx, &batch, &ds.blobs, Mode::Train, &mut rng)?
            }
            2 => {
                let batch: Vec<_> = idx.iter().map(|&i| &ds.pairs[i]).collect();
                stage2_step(model, &ctx, &batch, weights, &mut rng)?
            }
            _ => {
                let batch: Vec<_> = idx.iter().map(|&i| dialogues[i]).collect();
                stage3_step(model, &ctx, &batch, &ds.blobs, weights, Mode::Train, &mut rng)?
            }
        };
        let grads = out.loss.backward()?;
        let lr = lr_at(step, total, recipe.lr, recipe.warmup_ratio);
        adam.step(&model.store, &mask, &grads, lr)?;
        let m = StepMetrics { stage, step, lr, loss: out.parts };
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&m)?;
            writeln!(w, "{line}").map_err(|e| Error::io("metrics log", e))?;
        }
        metrics.push(m);
    }
    if !model.provenance.stages.contains(&stage) {
        model.provenance.stages.push(stage);
    }
    Ok(StageReport { stage, steps: total, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn buckets_partition_the_epoch(lengths in proptest::collection::vec(0usize..500, 1..60), batch in 1usize..9, seed: u64) {
            let b = bucketed_batches(&lengths, batch, &mut derived_rng(seed, "t"));
            let mut seen: Vec<usize> = b.iter().flatten().copied().collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..lengths.len()).collect::<Vec<_>>());
            prop_assert!(b.iter().all(|x| !x.is_empty() && x.len() <= batch));
            prop_assert_eq!(b.iter().filter(|x| x.len() < batch).count() <= 1, true);
        }
    }
}
