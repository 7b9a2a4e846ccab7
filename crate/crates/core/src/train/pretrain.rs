//! Preparation before the alignment stages: the base LLM learns the synthetic
//! language from text alone (attachments appear as gist strings), and each
//! diffusion backbone learns to denoise latents under caption conditioning.
//! Both play the role of pretrained components and stay frozen afterwards.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::Tensor;
use rand::Rng;

use crate::chat::{render_caption, render_dialogue, AttachmentMode, Rendered, RenderOptions};
use crate::config::Modality;
use crate::data::io::Dataset;
use crate::data::synth::{Attachment, Attributes};
use crate::diffusion::{latent_dim, pretrain_backbone, BackboneRecipe};
use crate::error::{Error, Result};
use crate::model::NxModel;
use crate::params::Ctx;
use crate::tokenizer::tokenize;
use crate::train::losses::forward_rendered_shifted;
use crate::train::optim::{lr_at, Adam};
use crate::train::recipe::PretrainRecipe;
use crate::train::runner::bucketed_batches;
use crate::util::derived_rng;

/// Text-only corpus: one captioning turn per attribute combination plus
/// every dialogue, attachments replaced by their gist and runs omitted.
pub fn text_corpus(model: &NxModel, ds: &Dataset) -> Result<Vec<Rendered>> {
    let mode = AttachmentMode::Gist(model.concept_len());
    let mut out = Vec::new();
    for m in Modality::NON_TEXT {
        for attrs in Attributes::all(m)? {
            let a = Attachment {
                modality: m,
                attributes: attrs,
                latent: attrs.mode_center(),
                caption: attrs.caption(),
                blob: String::new(),
            };
            out.push(render_caption(&a, mode)?);
        }
    }
    let opts = RenderOptions { attachments: mode, runs: false };
    for d in ds.t2m.iter().chain(&ds.mosit) {
        out.push(render_dialogue(d, &model.vocab, opts)?);
    }
    Ok(out)
}

/// Fit `llm.base.*` on the text corpus. Returns per-step losses.
pub fn pretrain_llm(model: &mut NxModel, ds: &Dataset, recipe: &PretrainRecipe, seed: u64) -> Result<Vec<f64>> {
    let corpus = text_corpus(model, ds)?;
    if corpus.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let trainable: BTreeSet<String> = model.store.names_with_prefix("llm.base.").cloned().collect();
    let mut adam = Adam::new(recipe.weight_decay);
    let mut rng = derived_rng(seed, "pretrain.llm");
    let mut losses = Vec::with_capacity(recipe.steps);
    let lengths: Vec<usize> = corpus.iter().map(|r| r.len()).collect();
    let mut queue: Vec<Vec<usize>> = Vec::new();
    for step in 0..recipe.steps {
        if queue.is_empty() {
            queue = bucketed_batches(&lengths, recipe.batch_size, &mut rng);
        }
        let batch: Vec<Rendered> = queue.pop().expect("refilled above").into_iter().map(|i| corpus[i].clone()).collect();
        let empty = vec![Vec::new(); batch.len()];
        let max_len = model.cfg.llm.max_len;
        let offsets: Vec<usize> = batch
            .iter()
            .map(|r| rng.gen_range(0..=recipe.max_shift.min(max_len.saturating_sub(r.len()))))
            .collect();
        let ctx = Ctx::train(&trainable, step as u64);
        let (_, ce, _) = forward_rendered_shifted(model, &ctx, &batch, &empty, &offsets)?;
        let ce = ce.ok_or(Error::EmptyBatch)?;
        let v = ce.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        if !v.is_finite() {
            return Err(Error::Numeric("pretraining loss".into()));
        }
        losses.push(v);
        let grads = ce.backward()?;
        let lr = lr_at(step, recipe.steps, recipe.lr, recipe.warmup_ratio);
        adam.step(&model.store, &trainable, &grads, lr)?;
    }
    model.provenance.llm_pretrained = true;
    Ok(losses)
}

/// Fresh latent draws per caption pair used for backbone pretraining.
pub const BACKBONE_DRAWS: usize = 8;

/// Pretrain every diffusion backbone on `(caption encoding, latent)` pairs.
/// Each dataset pair contributes its own latent plus fresh draws around the
/// same mode.
pub fn pretrain_backbones(
    model: &mut NxModel,
    ds: &Dataset,
    recipe: BackboneRecipe,
    seed: u64,
) -> Result<BTreeMap<Modality, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for m in Modality::NON_TEXT {
        let pairs: Vec<_> = ds.pairs_of(m).collect();
        if pairs.is_empty() {
            return Err(Error::Dependency(format!("no {m} caption pairs to pretrain its decoder")));
        }
        let mut rng = derived_rng(seed, &format!("pretrain.backbone.{m}"));
        let ids = pairs
            .iter()
            .map(|p| tokenize(&p.item.caption))
            .collect::<Result<Vec<_>>>()?;
        let enc = model.conditioners[&m].encode_batch(&Ctx::eval(), &ids)?;
        let mut conds = Vec::new();
        let mut latents: Vec<f32> = Vec::new();
        for (i, p) in pairs.iter().enumerate() {
            conds.push(enc.get(i)?);
            latents.extend(&p.item.latent);
            for _ in 0..BACKBONE_DRAWS {
                conds.push(enc.get(i)?);
                latents.extend(p.item.attributes.sample_latent(&mut rng));
            }
        }
        let n = conds.len();
        let conds = Tensor::stack(&conds, 0)?;
        let latents = Tensor::from_vec(latents, (n, latent_dim(m)), conds.device())?.to_dtype(conds.dtype())?;
        let denoiser = model.denoisers.get_mut(&m).expect("every modality has a decoder");
        let losses = pretrain_backbone(denoiser, &model.store, &conds, &latents, recipe, &mut rng)?;
        model.mark_backbone(m);
        out.insert(m, losses);
    }
    Ok(out)
}
