//! Per-stage objectives. Each step renders its batch, runs the model once and
//! returns the weighted total (for backprop) plus every component.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blob::Blob;
use crate::chat::{render_caption, render_dialogue, render_signal, AttachmentMode, Rendered, RenderOptions, RunSite};
use crate::config::Modality;
use crate::data::synth::{CaptionPair, Dialogue, Speaker};
use crate::error::{Error, Result};
use crate::grouping::Mode;
use crate::llm::{masked_cross_entropy, LlmOutput};
use crate::model::NxModel;
use crate::outproj::caption_align_loss;
use crate::params::Ctx;
use crate::tokenizer::tokenize;
use crate::train::recipe::StageRecipe;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce_text: f64,
    pub nll_signal: f64,
    pub align_l2: f64,
    pub denoise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub nll: f64,
    pub align: f64,
    pub denoise: f64,
}

impl LossWeights {
    pub fn unit() -> Self {
        Self { nll: 1.0, align: 1.0, denoise: 1.0 }
    }

    pub fn of(recipe: &StageRecipe) -> Self {
        let gen = |on: bool, w: f64| if recipe.stage == 3 && !on { 0.0 } else { w };
        Self {
            nll: recipe.lambda_nll,
            align: gen(recipe.gen_align, recipe.lambda_align),
            denoise: gen(recipe.gen_denoise, recipe.lambda_denoise),
        }
    }
}

pub struct StepLoss {
    pub loss: Tensor,
    pub parts: LossBreakdown,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `ce + w.nll * nll + w.align * align + w.denoise * denoise`; missing terms
/// count as zero.
pub fn combine(
    ce: Option<Tensor>,
    nll: Option<Tensor>,
    align: Option<Tensor>,
    denoise: Option<Tensor>,
    w: LossWeights,
) -> Result<StepLoss> {
    let mut parts = LossBreakdown::default();
    let mut total: Option<Tensor> = None;
    let mut add = |t: Option<Tensor>, weight: f64, slot: &mut f64| -> Result<()> {
        if let Some(t) = t {
            *slot = scalar(&t)?;
            if weight != 0.0 {
                let term = (t * weight)?;
                total = Some(match total.take() {
                    Some(acc) => (acc + term)?,
                    None => term,
                });
            }
        }
        Ok(())
    };
    add(ce, 1.0, &mut parts.ce_text)?;
    add(nll, w.nll, &mut parts.nll_signal)?;
    add(align, w.align, &mut parts.align_l2)?;
    add(denoise, w.denoise, &mut parts.denoise)?;
    let loss = total.ok_or_else(|| Error::InvalidInput("no loss terms".into()))?;
    parts.total = scalar(&loss)?;
    if !parts.total.is_finite() {
        return Err(Error::Numeric("training loss".into()));
    }
    Ok(StepLoss { loss, parts })
}

/// Teacher-forced forward over rendered sequences; returns the output and
/// the text and signal cross-entropies (`None` when nothing is supervised).
pub fn forward_rendered(
    model: &NxModel,
    ctx: &Ctx,
    rendered: &[Rendered],
    concepts: &[Vec<Tensor>],
) -> Result<(LlmOutput, Option<Tensor>, Option<Tensor>)> {
    forward_rendered_shifted(model, ctx, rendered, concepts, &vec![0; rendered.len()])
}

/// `forward_rendered` with each sequence starting at its own position offset.
pub fn forward_rendered_shifted(
    model: &NxModel,
    ctx: &Ctx,
    rendered: &[Rendered],
    concepts: &[Vec<Tensor>],
    offsets: &[usize],
) -> Result<(LlmOutput, Option<Tensor>, Option<Tensor>)> {
    let inputs = rendered
        .iter()
        .zip(concepts)
        .map(|(r, c)| model.mixed_input(r, c))
        .collect::<Result<Vec<_>>>()?;
    let out = model.llm.forward_shifted(ctx, &inputs, offsets, true)?;
    let mut targets = Vec::with_capacity(rendered.len());
    let mut tw = Vec::with_capacity(rendered.len());
    let mut sw = Vec::with_capacity(rendered.len());
    for r in rendered {
        let t = r.targets(&model.vocab);
        targets.push(t.targets);
        tw.push(t.text_weights);
        sw.push(t.signal_weights);
    }
    let (ce, n_text) = masked_cross_entropy(&out.logits, &targets, &tw)?;
    let (nll, n_sig) = masked_cross_entropy(&out.logits, &targets, &sw)?;
    Ok((out, (n_text > 0.0).then_some(ce), (n_sig > 0.0).then_some(nll)))
}

/// Alignment and denoising losses for every run site, averaged over sites.
/// `sites[b]` are the runs of batch row `b`.
pub fn generation_losses(
    model: &NxModel,
    ctx: &Ctx,
    hidden: &Tensor,
    sites: &[Vec<RunSite>],
    rng: &mut impl Rng,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let mut by_modality: BTreeMap<Modality, Vec<(usize, &RunSite)>> = BTreeMap::new();
    for (b, row) in sites.iter().enumerate() {
        for s in row {
            by_modality.entry(s.modality).or_default().push((b, s));
        }
    }
    let total: usize = by_modality.values().map(Vec::len).sum();
    if total == 0 {
        return Ok((None, None));
    }
    let mut align: Option<Tensor> = None;
    let mut denoise: Option<Tensor> = None;
    for (m, group) in by_modality {
        let k = model.vocab.count(m);
        let states = group
            .iter()
            .map(|(b, s)| Ok(hidden.get(*b)?.narrow(0, s.start, k)?))
            .collect::<Result<Vec<_>>>()?;
        let proj = model.outproj[&m].project(ctx, &Tensor::stack(&states, 0)?)?;
        let captions = group
            .iter()
            .map(|(_, s)| tokenize(&s.attachment.caption))
            .collect::<Result<Vec<_>>>()?;
        let target = model.conditioners[&m].encode_batch(&Ctx::eval(), &captions)?.to_dtype(proj.dtype())?;
        let share = group.len() as f64 / total as f64;
        let a = (caption_align_loss(&proj, &target)? * share)?;
        let latents: Vec<f32> = group.iter().flat_map(|(_, s)| s.attachment.latent.clone()).collect();
        let x0 = Tensor::from_vec(latents, (group.len(), crate::diffusion::latent_dim(m)), proj.device())?
            .to_dtype(proj.dtype())?;
        let d = (model.denoisers[&m].denoise_loss(ctx, &x0, &proj, rng)? * share)?;
        align = Some(match align {
            Some(acc) => (acc + a)?,
            None => a,
        });
        denoise = Some(match denoise {
            Some(acc) => (acc + d)?,
            None => d,
        });
    }
    Ok((align, denoise))
}

/// X-to-text captioning through the frozen LLM; only the grouping projection
/// learns.
pub fn stage1_step(
    model: &NxModel,
    ctx: &Ctx,
    batch: &[&CaptionPair],
    blobs: &BTreeMap<String, Blob>,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<StepLoss> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let atts: Vec<_> = batch.iter().map(|p| p.item.clone()).collect();
    let concepts = model.project_attachments(ctx, &atts, blobs, mode, rng)?;
    let rendered = atts
        .iter()
        .map(|a| render_caption(a, AttachmentMode::Concepts(model.concept_len())))
        .collect::<Result<Vec<_>>>()?;
    let per_row: Vec<Vec<Tensor>> = concepts.into_iter().map(|c| vec![c]).collect();
    let (_, ce, _) = forward_rendered(model, ctx, &rendered, &per_row)?;
    combine(ce, None, None, None, LossWeights::unit())
}

/// Caption followed by the gold signal run: text CE, signal NLL, caption
/// alignment of the projected run states, and conditional denoising.
pub fn stage2_step(
    model: &NxModel,
    ctx: &Ctx,
    batch: &[&CaptionPair],
    weights: LossWeights,
    rng: &mut impl Rng,
) -> Result<StepLoss> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let rendered = batch
        .iter()
        .map(|p| {
            if p.item.modality == Modality::Text {
                return Err(Error::WrongModality(Modality::Text));
            }
            render_signal(&p.item, &model.vocab)
        })
        .collect::<Result<Vec<_>>>()?;
    let empty = vec![Vec::new(); rendered.len()];
    let (out, ce, nll) = forward_rendered(model, ctx, &rendered, &empty)?;
    let sites: Vec<Vec<RunSite>> = rendered.iter().map(|r| r.runs.clone()).collect();
    let (align, denoise) = generation_losses(model, ctx, &out.hidden, &sites, rng)?;
    combine(ce, nll, align, denoise, weights)
}

/// Dialogue tuning: response CE over machine text and signal runs plus the
/// generation losses on machine attachments.
pub fn stage3_step(
    model: &NxModel,
    ctx: &Ctx,
    batch: &[&Dialogue],
    blobs: &BTreeMap<String, Blob>,
    weights: LossWeights,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<StepLoss> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let opts = RenderOptions { attachments: AttachmentMode::Concepts(model.concept_len()), runs: true };
    let mut rendered = Vec::with_capacity(batch.len());
    for d in batch {
        if !d.messages.iter().any(|m| m.speaker == Speaker::Machine) {
            return Err(Error::Dialogue(format!("{} has no machine turns", d.id)));
        }
        rendered.push(render_dialogue(d, &model.vocab, opts)?);
    }
    // Project every human attachment of the batch in one pass.
    let all: Vec<_> = rendered.iter().flat_map(|r| r.inputs.clone()).collect();
    let mut flat = model.project_attachments(ctx, &all, blobs, mode, rng)?.into_iter();
    let concepts: Vec<Vec<Tensor>> = rendered
        .iter()
        .map(|r| flat.by_ref().take(r.inputs.len()).collect())
        .collect();
    let (out, ce, nll) = forward_rendered(model, ctx, &rendered, &concepts)?;
    let sites: Vec<Vec<RunSite>> = rendered.iter().map(|r| r.runs.clone()).collect();
    let (align, denoise) = generation_losses(model, ctx, &out.hidden, &sites, rng)?;
    let zero = || Tensor::zeros((), out.hidden.dtype(), out.hidden.device());
    let align = if weights.align > 0.0 { Some(align.map_or_else(zero, Ok)?) } else { None };
    let denoise = if weights.denoise > 0.0 { Some(denoise.map_or_else(zero, Ok)?) } else { None };
    combine(ce, nll, align, denoise, weights)
}
