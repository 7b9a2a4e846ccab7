//! Held-in measurements used by the stage runner, the CLI and the acceptance
//! suite. Everything runs in eval mode (no Gumbel noise, no dropout).

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::blob::Blob;
use crate::chat::{render_caption, render_prompt, render_signal, AttachmentMode, RenderOptions, RunSite};
use crate::config::Modality;
use crate::data::synth::{CaptionPair, Dialogue, Speaker};
use crate::error::{Error, Result};
use crate::grouping::Mode;
use crate::llm::argmax_ids;
use crate::model::{InferenceOptions, NxModel};
use crate::outproj::sequence_cosine;
use crate::params::Ctx;
use crate::tokenizer::tokenize;
use crate::train::losses::forward_rendered;
use crate::util::derived_rng;

fn f64_of(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Mean caption cross-entropy per token (nats) over `pairs`.
pub fn caption_ce(model: &NxModel, pairs: &[&CaptionPair], blobs: &BTreeMap<String, Blob>) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let ctx = Ctx::eval();
    let mut rng = derived_rng(0, "eval.caption");
    let atts: Vec<_> = pairs.iter().map(|p| p.item.clone()).collect();
    let concepts = model.project_attachments(&ctx, &atts, blobs, Mode::Eval, &mut rng)?;
    let mut total = 0.0;
    let mut tokens = 0usize;
    for (a, c) in atts.iter().zip(concepts) {
        let r = render_caption(a, AttachmentMode::Concepts(model.concept_len()))?;
        let n = r.targets(&model.vocab).text_weights.iter().filter(|w| **w > 0.0).count();
        let (_, ce, _) = forward_rendered(model, &ctx, &[r], &[vec![c]])?;
        total += f64_of(&ce.ok_or(Error::EmptyBatch)?)? * n as f64;
        tokens += n;
    }
    Ok(total / tokens as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalMetrics {
    /// Mean cosine between projected run states and the caption encodings.
    pub mean_cosine: f64,
    /// Teacher-forced argmax accuracy on signal-token targets.
    pub signal_accuracy: f64,
    pub align_l2: f64,
    /// Denoising loss conditioned on the projected run states, averaged over
    /// `DENOISE_DRAWS` fixed noise draws per sample.
    pub denoise: f64,
}

pub const DENOISE_DRAWS: usize = 8;

/// Caption-plus-run metrics over `pairs`.
pub fn signal_metrics(model: &NxModel, pairs: &[&CaptionPair]) -> Result<SignalMetrics> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let ctx = Ctx::eval();
    let mut cos_sum = 0.0;
    let mut l2_sum = 0.0;
    let mut dn_sum = 0.0;
    let mut rng = derived_rng(0, "eval.denoise");
    let (mut hits, mut total) = (0usize, 0usize);
    for p in pairs {
        let r = render_signal(&p.item, &model.vocab)?;
        let t = r.targets(&model.vocab);
        let (out, _, _) = forward_rendered(model, &ctx, std::slice::from_ref(&r), &[Vec::new()])?;
        let pred = &argmax_ids(&out.logits)?[0];
        for (i, w) in t.signal_weights.iter().enumerate() {
            if *w > 0.0 {
                total += 1;
                hits += usize::from(pred[i] == t.targets[i]);
            }
        }
        let (proj, target) = project_site(model, &out.hidden.get(0)?, &r.runs[0])?;
        cos_sum += sequence_cosine(&proj, &target)?[0];
        l2_sum += f64_of(&crate::outproj::caption_align_loss(&proj, &target)?)?;
        let m = p.item.modality;
        let x0 = Tensor::from_vec(p.item.latent.clone(), (1, p.item.latent.len()), proj.device())?
            .to_dtype(proj.dtype())?
            .repeat((DENOISE_DRAWS, 1))?;
        let cond = Tensor::stack(&vec![proj.clone(); DENOISE_DRAWS], 0)?;
        dn_sum += f64_of(&model.denoisers[&m].denoise_loss(&ctx, &x0, &cond, &mut rng)?)?;
    }
    let n = pairs.len() as f64;
    Ok(SignalMetrics {
        mean_cosine: cos_sum / n,
        signal_accuracy: hits as f64 / total.max(1) as f64,
        align_l2: l2_sum / n,
        denoise: dn_sum / n,
    })
}

/// Projected run states and the conditioner target for one run site.
pub fn project_site(model: &NxModel, hidden: &Tensor, site: &RunSite) -> Result<(Tensor, Tensor)> {
    let ctx = Ctx::eval();
    let k = model.vocab.count(site.modality);
    let proj = model.outproj[&site.modality].project(&ctx, &hidden.narrow(0, site.start, k)?)?;
    let target = model.conditioners[&site.modality]
        .encode(&ctx, &tokenize(&site.attachment.caption)?)?
        .to_dtype(proj.dtype())?;
    Ok((proj, target))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueMetrics {
    pub machine_turns: usize,
    /// Generated signal-token subsequence equals the gold run (or is empty
    /// when no run is expected).
    pub emission_accuracy: f64,
    /// Parsed activation map equals the gold map.
    pub activation_exact_match: f64,
    /// Decoder invocations, counted by the model.
    pub decoder_calls: BTreeMap<Modality, usize>,
    /// Activations observed in the parsed streams.
    pub activations: BTreeMap<Modality, usize>,
}

/// Free-running greedy generation for every machine turn, with the gold
/// history as context. With `decode` the full inference path runs, so
/// decoder invocations are counted.
pub fn dialogue_metrics(
    model: &NxModel,
    dialogues: &[&Dialogue],
    blobs: &BTreeMap<String, Blob>,
    decode: bool,
) -> Result<DialogueMetrics> {
    let opts = RenderOptions { attachments: AttachmentMode::Concepts(model.concept_len()), runs: true };
    let infer = InferenceOptions { max_new: 64, ..Default::default() };
    let ctx = Ctx::eval();
    let mut rng = derived_rng(0, "eval.dialogue");
    let (mut turns, mut emitted_ok, mut activation_ok) = (0usize, 0usize, 0usize);
    let mut activations: BTreeMap<Modality, usize> = Modality::NON_TEXT.iter().map(|&m| (m, 0)).collect();
    model.reset_decoder_calls();
    for d in dialogues {
        for (i, msg) in d.messages.iter().enumerate() {
            if msg.speaker != Speaker::Machine {
                continue;
            }
            let prompt = render_prompt(d, i, &model.vocab, opts)?;
            let concepts = model.project_attachments(&ctx, &prompt.inputs, blobs, Mode::Eval, &mut rng)?;
            let (ids, decision) = if decode {
                let out = model.infer_rendered(&prompt, &concepts, &infer)?;
                (out.ids, out.decision)
            } else {
                let stream = model.respond(&prompt, &concepts, &infer)?;
                let decision = crate::routing::parse_stream(&stream, &model.vocab)?;
                (stream.ids, decision)
            };
            let emitted: Vec<u32> = ids.iter().copied().filter(|&t| model.vocab.is_signal(t)).collect();
            let gold_ids = msg.gold_run.map(|m| model.vocab.run(m)).unwrap_or_default();
            let gold_map: BTreeMap<Modality, bool> =
                Modality::NON_TEXT.iter().map(|&m| (m, msg.gold_run == Some(m))).collect();
            turns += 1;
            emitted_ok += usize::from(emitted == gold_ids);
            activation_ok += usize::from(decision.activation_map() == gold_map);
            for m in decision.activated() {
                *activations.get_mut(&m).expect("non-text modality") += 1;
            }
        }
    }
    if turns == 0 {
        return Err(Error::Dialogue("no machine turns to evaluate".into()));
    }
    Ok(DialogueMetrics {
        machine_turns: turns,
        emission_accuracy: emitted_ok as f64 / turns as f64,
        activation_exact_match: activation_ok as f64 / turns as f64,
        decoder_calls: model.decoder_calls(),
        activations,
    })
}
