//! The assembled system: frozen encoders, grouping input projection, LLM
//! with LoRA, and per-modality output projection, conditioner and diffusion
//! decoder. All tensors live in one [`ParamStore`].

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blob::Blob;
use crate::budget::{param_budget, BudgetEntry, ParamBudget, Role};
use crate::chat::{render_request, Rendered, Span};
use crate::conditioner::Conditioner;
use crate::config::{validate_config, Modality, ModelConfig};
use crate::data::synth::Attachment;
use crate::diffusion::Denoiser;
use crate::encoders::{RawSample, ToyEncoders};
use crate::error::{Error, Result};
use crate::grouping::{GroupingProjector, Mode};
use crate::llm::{Decoding, GeneratedStream, Llm, MixedInput};
use crate::outproj::OutputProjection;
use crate::params::{module_of, Ctx, ParamStore};
use crate::routing::{parse_stream, ModalityRoute, ProtocolViolation, RoutingDecision};
use crate::tokenizer::SignalVocabulary;
use crate::util::derived_rng;

/// What has been trained so far.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Text pretraining of the base LLM.
    pub llm_pretrained: bool,
    /// Modalities whose diffusion backbone has been pretrained.
    pub backbones: BTreeSet<Modality>,
    /// Completed alignment stages, in order.
    pub stages: Vec<u8>,
}

pub struct NxModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub vocab: SignalVocabulary,
    pub encoders: ToyEncoders,
    pub grouping: GroupingProjector,
    pub llm: Llm,
    pub outproj: BTreeMap<Modality, OutputProjection>,
    pub conditioners: BTreeMap<Modality, Conditioner>,
    pub denoisers: BTreeMap<Modality, Denoiser>,
    pub provenance: Provenance,
    decoder_calls: [AtomicUsize; 3],
}

/// Result of one inference call.
#[derive(Debug, Clone)]
pub struct InferenceOutput {
    pub ids: Vec<u32>,
    pub decision: RoutingDecision,
    /// One sampled latent per activated modality.
    pub latents: BTreeMap<Modality, Vec<f32>>,
}

/// Serializable inference record; latents are referenced by blob path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub text: String,
    pub activations: BTreeMap<Modality, bool>,
    pub violations: Vec<ProtocolViolation>,
    pub latents: BTreeMap<Modality, String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceOptions {
    pub max_new: usize,
    pub decoding: Decoding,
    pub seed: u64,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self { max_new: 96, decoding: Decoding::Greedy, seed: 0 }
    }
}

impl NxModel {
    pub fn new(cfg: &ModelConfig, dtype: DType) -> Result<Self> {
        validate_config(cfg).into_result()?;
        let mut store = ParamStore::new(cfg.seed, dtype);
        let vocab = SignalVocabulary::new(cfg.signals);
        let encoders = ToyEncoders::new(&mut store, &cfg.encoder)?;
        let grouping = GroupingProjector::new(&mut store, cfg)?;
        let mut outproj = BTreeMap::new();
        let mut conditioners = BTreeMap::new();
        let mut denoisers = BTreeMap::new();
        for m in Modality::NON_TEXT {
            outproj.insert(m, OutputProjection::new(&mut store, m, &cfg.outproj, cfg.signal_count(m), cfg.llm.dim)?);
            conditioners.insert(m, Conditioner::new(&mut store, m, &cfg.outproj)?);
            denoisers.insert(m, Denoiser::new(&mut store, m, &cfg.diffusion, cfg.outproj.cond_dim)?);
        }
        let rows = Modality::NON_TEXT.iter().map(|m| outproj[m].signal_rows()).collect();
        let llm = Llm::new(&mut store, &cfg.llm, &cfg.lora, vocab.clone(), rows)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            vocab,
            encoders,
            grouping,
            llm,
            outproj,
            conditioners,
            denoisers,
            provenance: Provenance::default(),
            decoder_calls: Default::default(),
        })
    }

    /// Concept rows each attachment contributes to the LLM input.
    pub fn concept_len(&self) -> usize {
        self.grouping.output_tokens()
    }

    /// Replace provenance and keep the decoders' sampling flags in sync.
    pub fn set_provenance(&mut self, p: Provenance) {
        for (m, d) in &mut self.denoisers {
            d.trained = p.backbones.contains(m);
        }
        self.provenance = p;
    }

    pub fn mark_backbone(&mut self, m: Modality) {
        self.provenance.backbones.insert(m);
        if let Some(d) = self.denoisers.get_mut(&m) {
            d.trained = true;
        }
    }

    /// Parameter counts per component of this instance, with their roles.
    pub fn budget(&self) -> Result<ParamBudget> {
        let mut groups: BTreeMap<(String, Role), u64> = BTreeMap::new();
        for (name, entry) in self.store.entries() {
            let n = entry.param.var().as_tensor().elem_count() as u64;
            *groups.entry((module_of(name), entry.role)).or_default() += n;
        }
        param_budget(groups.into_iter().map(|((name, role), n)| BudgetEntry::new(name, n, role)).collect())
    }

    /// Concept blocks (`M_L x d_llm` each) for raw samples, in order.
    pub fn project_samples(&self, ctx: &Ctx, samples: &[RawSample], mode: Mode, rng: &mut impl Rng) -> Result<Vec<Tensor>> {
        let mut out: Vec<Option<Tensor>> = vec![None; samples.len()];
        // One grouping call per modality keeps token counts uniform in a batch.
        for m in Modality::NON_TEXT {
            let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].modality() == m).collect();
            if idx.is_empty() {
                continue;
            }
            let feats = idx
                .iter()
                .map(|&i| Ok(self.encoders.encode(&samples[i], &self.store)?.features))
                .collect::<Result<Vec<_>>>()?;
            let concepts = self.grouping.project(ctx, &Tensor::stack(&feats, 0)?, mode, rng)?.concepts;
            for (row, &i) in idx.iter().enumerate() {
                out[i] = Some(concepts.get(row)?);
            }
        }
        out.into_iter()
            .map(|t| t.ok_or(Error::WrongModality(Modality::Text)))
            .collect()
    }

    pub fn project_attachments(
        &self,
        ctx: &Ctx,
        atts: &[Attachment],
        blobs: &BTreeMap<String, Blob>,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Vec<Tensor>> {
        let samples = atts.iter().map(|a| a.payload(blobs)).collect::<Result<Vec<_>>>()?;
        self.project_samples(ctx, &samples, mode, rng)
    }

    /// LLM input for a rendered sequence with its concept blocks.
    pub fn mixed_input(&self, r: &Rendered, concepts: &[Tensor]) -> Result<MixedInput> {
        let mut input = MixedInput::new();
        for s in &r.spans {
            match s {
                Span::Tokens { ids, .. } => input.push_tokens(ids),
                Span::Concepts { index, modality, .. } => {
                    let c = concepts.get(*index).ok_or_else(|| {
                        Error::InvalidInput(format!("no concept block for input {index}"))
                    })?;
                    input.push_concepts(*modality, c.clone());
                }
            }
        }
        Ok(input)
    }

    /// Greedy or sampled continuation of a rendered prompt.
    pub fn respond(&self, prompt: &Rendered, concepts: &[Tensor], opts: &InferenceOptions) -> Result<GeneratedStream> {
        let input = self.mixed_input(prompt, concepts)?;
        let mut rng = derived_rng(opts.seed, "generate");
        self.llm.generate(&input, opts.max_new, opts.decoding, true, &mut rng)
    }

    /// Snapshot of decoder invocations since the last reset.
    pub fn decoder_calls(&self) -> BTreeMap<Modality, usize> {
        Modality::NON_TEXT
            .iter()
            .enumerate()
            .map(|(i, &m)| (m, self.decoder_calls[i].load(Ordering::SeqCst)))
            .collect()
    }

    pub fn reset_decoder_calls(&self) {
        for c in &self.decoder_calls {
            c.store(0, Ordering::SeqCst);
        }
    }

    /// Project and sample every activated modality; deactivated decoders are
    /// never touched.
    pub fn decode(&self, decision: &RoutingDecision, seed: u64) -> Result<BTreeMap<Modality, Vec<f32>>> {
        for (m, route) in &decision.routes {
            if route.is_activated() && !self.denoisers[m].trained {
                return Err(Error::MissingDecoder(*m));
            }
        }
        let mut latents = BTreeMap::new();
        for (i, m) in Modality::NON_TEXT.iter().enumerate() {
            let Some(ModalityRoute::Activated { states, .. }) = decision.routes.get(m) else {
                continue;
            };
            let ctx = Ctx::eval();
            let cond = self.outproj[m].project_signal(&ctx, states)?;
            self.decoder_calls[i].fetch_add(1, Ordering::SeqCst);
            let mut rng = derived_rng(seed, &format!("sample.{m}"));
            let z = self.denoisers[m].sample(&cond.values, &mut rng)?;
            latents.insert(*m, z.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?);
        }
        Ok(latents)
    }

    /// Generate from a rendered prompt, route, and decode.
    pub fn infer_rendered(&self, prompt: &Rendered, concepts: &[Tensor], opts: &InferenceOptions) -> Result<InferenceOutput> {
        let stream = self.respond(prompt, concepts, opts)?;
        let decision = parse_stream(&stream, &self.vocab)?;
        let latents = self.decode(&decision, opts.seed)?;
        Ok(InferenceOutput { ids: stream.ids, decision, latents })
    }

    /// Encode attachments, project, generate, parse, and decode.
    pub fn run_inference(&self, text: &str, attachments: &[RawSample], opts: &InferenceOptions) -> Result<InferenceOutput> {
        let modalities: Vec<Modality> = attachments.iter().map(RawSample::modality).collect();
        let prompt = render_request(text, &modalities, self.concept_len())?;
        let mut rng = derived_rng(opts.seed, "grouping");
        let concepts = self.project_samples(&Ctx::eval(), attachments, Mode::Eval, &mut rng)?;
        self.infer_rendered(&prompt, &concepts, opts)
    }
}

impl InferenceOutput {
    /// Record with latent paths produced by `name_of(modality)`.
    pub fn record(&self, name_of: impl Fn(Modality) -> String) -> InferenceRecord {
        InferenceRecord {
            text: self.decision.text.clone(),
            activations: self.decision.activation_map(),
            violations: self.decision.violations.clone(),
            latents: self.latents.keys().map(|&m| (m, name_of(m))).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::Attributes;
    use crate::diffusion::latent_dim;
    use crate::grouping::Mode;
    use crate::llm::GeneratedStream;
    use crate::tokenizer::tokenize;

    fn model() -> NxModel {
        NxModel::new(&ModelConfig::desk(), DType::F32).unwrap()
    }

    fn stream_with_runs(m: &NxModel, runs: &[Modality]) -> GeneratedStream {
        let mut ids = tokenize("ok").unwrap();
        for &r in runs {
            ids.extend(m.vocab.run(r));
        }
        let hidden = Tensor::randn(0f32, 1.0, (ids.len(), m.cfg.llm.dim), &candle_core::Device::Cpu).unwrap();
        GeneratedStream { ids, hidden }
    }

    #[test]
    fn budget_matches_tensor_counts() {
        let m = model();
        let b = m.budget().unwrap();
        let total: u64 = m.store.entries().map(|(_, e)| e.param.var().as_tensor().elem_count() as u64).sum();
        assert_eq!(b.trainable_total + b.frozen_total, total);
        let trainable = m.store.count_prefix("grouping.") + m.store.count_prefix("llm.lora.") + m.store.count_prefix("outproj.");
        assert_eq!(b.trainable_total, trainable);
        assert!(b.ratio > 0.0 && b.ratio < 1.0);
    }

    #[test]
    fn decoders_run_only_when_activated() {
        let mut m = model();
        for d in Modality::NON_TEXT {
            m.mark_backbone(d);
        }
        let both = stream_with_runs(&m, &[Modality::Image, Modality::Audio]);
        let decision = parse_stream(&both, &m.vocab).unwrap();
        let latents = m.decode(&decision, 1).unwrap();
        assert_eq!(latents.len(), 2);
        assert_eq!(latents[&Modality::Image].len(), latent_dim(Modality::Image));
        let calls = m.decoder_calls();
        assert_eq!((calls[&Modality::Image], calls[&Modality::Audio], calls[&Modality::Video]), (1, 1, 0));
        m.reset_decoder_calls();
        let none = parse_stream(&stream_with_runs(&m, &[]), &m.vocab).unwrap();
        assert!(m.decode(&none, 1).unwrap().is_empty());
        assert!(m.decoder_calls().values().all(|&c| c == 0));
    }

    #[test]
    fn missing_backbone_is_named() {
        let m = model();
        let decision = parse_stream(&stream_with_runs(&m, &[Modality::Video]), &m.vocab).unwrap();
        match m.decode(&decision, 0) {
            Err(Error::MissingDecoder(Modality::Video)) => {}
            other => panic!("expected a missing-decoder error, got {other:?}"),
        }
        assert!(m.decoder_calls().values().all(|&c| c == 0));
    }

    #[test]
    fn inference_runs_end_to_end() {
        let m = model();
        let a = Attributes::Image { color: 1, quadrant: 2, size: 0 };
        let sample = crate::data::synth::render(&a, &a.mode_center(), &m.cfg.encoder);
        let opts = InferenceOptions { max_new: 8, ..Default::default() };
        // An untrained model may or may not emit runs; it must never crash
        // unless it activates an untrained decoder.
        match m.run_inference("what is this?", &[sample], &opts) {
            Ok(out) => assert!(out.ids.len() <= 8),
            Err(Error::MissingDecoder(_)) => {}
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn projected_samples_keep_order() {
        let m = model();
        let cfg = &m.cfg.encoder;
        let img = Attributes::Image { color: 0, quadrant: 0, size: 1 };
        let aud = Attributes::Audio { pitch: 2, loudness: 1, timbre: 0 };
        let s = vec![
            crate::data::synth::render(&aud, &aud.mode_center(), cfg),
            crate::data::synth::render(&img, &img.mode_center(), cfg),
        ];
        let mut rng = derived_rng(0, "t");
        let both = m.project_samples(&Ctx::eval(), &s, Mode::Eval, &mut rng).unwrap();
        let single = m.project_samples(&Ctx::eval(), &s[1..], Mode::Eval, &mut rng).unwrap();
        assert_eq!(both[1].to_vec2::<f32>().unwrap(), single[0].to_vec2::<f32>().unwrap());
        assert_eq!(both[0].dims(), &[4, 64]);
    }
}
