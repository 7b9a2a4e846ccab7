//! Tiny decoder-only transformer standing in for the frozen LLM.
//!
//! Inputs interleave text tokens with projected concept blocks; concept rows
//! bypass the embedding table and are placed directly at their positions.
//! The vocabulary is the text vocabulary followed by the signal-token ranges.
//! Signal-token embedding and output rows belong to the per-modality output
//! projections (`outproj.{m}.signal_embed`, `outproj.{m}.signal_head`) so the
//! base weights (`llm.base.*`) can stay frozen while signal tokens are learnt.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Tensor, D};
use rand::Rng;

use crate::budget::Role;
use crate::config::{LlmConfig, LoraConfig, LoraTarget, Modality};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, Block, LayerNorm, LoraAdapter};
use crate::params::{Ctx, Param, ParamStore};
use crate::routing::{scan_signal_runs, ProtocolViolation};
use crate::tokenizer::{SignalVocabulary, EOS, TEXT_VOCAB};

#[derive(Debug, Clone)]
pub enum Segment {
    Tokens(Vec<u32>),
    /// Projected concept block, `M x d_llm`.
    Concepts { modality: Modality, features: Tensor },
}

impl Segment {
    pub fn len(&self) -> usize {
        match self {
            Segment::Tokens(t) => t.len(),
            Segment::Concepts { features, .. } => features.dims()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default)]
pub struct MixedInput {
    pub segments: Vec<Segment>,
}

impl MixedInput {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tokens(ids: Vec<u32>) -> Self {
        Self {
            segments: vec![Segment::Tokens(ids)],
        }
    }

    pub fn push_tokens(&mut self, ids: &[u32]) {
        if let Some(Segment::Tokens(last)) = self.segments.last_mut() {
            last.extend_from_slice(ids);
        } else {
            self.segments.push(Segment::Tokens(ids.to_vec()));
        }
    }

    pub fn push_concepts(&mut self, modality: Modality, features: Tensor) {
        self.segments.push(Segment::Concepts { modality, features });
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Token id per position, with `None` where a concept row sits.
    pub fn position_ids(&self) -> Vec<Option<u32>> {
        let mut out = Vec::with_capacity(self.len());
        for s in &self.segments {
            match s {
                Segment::Tokens(t) => out.extend(t.iter().map(|&i| Some(i))),
                Segment::Concepts { features, .. } => out.extend(std::iter::repeat(None).take(features.dims()[0])),
            }
        }
        out
    }

    /// Positions covered by concept blocks, with their modality.
    pub fn concept_spans(&self) -> Vec<(Modality, std::ops::Range<usize>)> {
        let mut pos = 0;
        let mut out = Vec::new();
        for s in &self.segments {
            let n = s.len();
            if let Segment::Concepts { modality, .. } = s {
                out.push((*modality, pos..pos + n));
            }
            pos += n;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct LlmOutput {
    /// `B x T x V`.
    pub logits: Tensor,
    /// Final normalized hidden states, `B x T x d`.
    pub hidden: Tensor,
    pub lengths: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    /// Softmax sampling at this temperature; `0` behaves as greedy.
    Temperature(f64),
}

/// Generated ids with the hidden state at each generated position.
#[derive(Debug, Clone)]
pub struct GeneratedStream {
    pub ids: Vec<u32>,
    /// `len(ids) x d`.
    pub hidden: Tensor,
}

/// Signal-token rows of one modality (owned by its output projection).
#[derive(Debug, Clone)]
pub struct SignalRows {
    pub modality: Modality,
    pub embed: Param,
    pub head: Param,
}

#[derive(Debug, Clone)]
pub struct Llm {
    pub cfg: LlmConfig,
    pub vocab: SignalVocabulary,
    pub embed: Param,
    pub pos: Param,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: Param,
    pub signals: Vec<SignalRows>,
}

impl Llm {
    pub fn new(
        store: &mut ParamStore,
        cfg: &LlmConfig,
        lora: &LoraConfig,
        vocab: SignalVocabulary,
        signals: Vec<SignalRows>,
    ) -> Result<Self> {
        let d = cfg.dim;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let mut block = Block::new(
                store,
                &format!("llm.base.layer{i}"),
                d,
                cfg.heads,
                d * cfg.mlp_ratio,
                0.0,
                Role::Frozen,
            )?;
            let hidden = d * cfg.mlp_ratio;
            for &t in &lora.targets {
                let (d_in, d_out) = match t {
                    LoraTarget::Fc1 => (d, hidden),
                    LoraTarget::Fc2 => (hidden, d),
                    _ => (d, d),
                };
                let adapter = Some(LoraAdapter::new(store, &format!("llm.lora.layer{i}.{}", t.name()), d_in, d_out, lora.rank, lora.alpha)?);
                match t {
                    LoraTarget::Q => block.attn.lora_q = adapter,
                    LoraTarget::K => block.attn.lora_k = adapter,
                    LoraTarget::V => block.attn.lora_v = adapter,
                    LoraTarget::O => block.attn.lora_o = adapter,
                    LoraTarget::Fc1 => block.mlp.lora_fc1 = adapter,
                    LoraTarget::Fc2 => block.mlp.lora_fc2 = adapter,
                }
            }
            blocks.push(block);
        }
        let order: Vec<Modality> = signals.iter().map(|s| s.modality).collect();
        if order != Modality::NON_TEXT {
            return Err(Error::InvalidInput("signal rows must be given as image, audio, video".into()));
        }
        Ok(Self {
            embed: store.normal("llm.base.embed", &[TEXT_VOCAB as usize, d], 0.1, Role::Frozen)?,
            pos: store.normal("llm.base.pos", &[cfg.max_len, d], 0.1, Role::Frozen)?,
            blocks,
            ln_f: LayerNorm::new(store, "llm.base.ln_f", d, Role::Frozen)?,
            head: store.normal("llm.base.head", &[TEXT_VOCAB as usize, d], (1.0 / d as f64).sqrt(), Role::Frozen)?,
            signals,
            vocab,
            cfg: cfg.clone(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.vocab_size()
    }

    fn embedding_table(&self, ctx: &Ctx) -> Result<Tensor> {
        let mut parts = vec![ctx.p(&self.embed)];
        parts.extend(self.signals.iter().map(|s| ctx.p(&s.embed)));
        Ok(Tensor::cat(&parts, 0)?)
    }

    fn output_table(&self, ctx: &Ctx) -> Result<Tensor> {
        let mut parts = vec![ctx.p(&self.head)];
        parts.extend(self.signals.iter().map(|s| ctx.p(&s.head)));
        Ok(Tensor::cat(&parts, 0)?)
    }

    fn embed_one(&self, table: &Tensor, input: &MixedInput) -> Result<Tensor> {
        let d = self.cfg.dim;
        let mut rows = Vec::with_capacity(input.segments.len());
        for seg in &input.segments {
            match seg {
                Segment::Tokens(ids) if ids.is_empty() => {}
                Segment::Tokens(ids) => {
                    let v = self.vocab_size() as u32;
                    if let Some(bad) = ids.iter().find(|&&i| i >= v) {
                        return Err(Error::InvalidInput(format!("token id {bad} outside vocabulary of {v}")));
                    }
                    let idx = Tensor::new(ids.as_slice(), table.device())?;
                    rows.push(table.index_select(&idx, 0)?);
                }
                Segment::Concepts { features, .. } => {
                    if features.dims2()?.1 != d {
                        return Err(Error::InvalidInput(format!(
                            "concept block width {} does not match llm width {d}",
                            features.dims2()?.1
                        )));
                    }
                    rows.push(features.to_dtype(table.dtype())?);
                }
            }
        }
        Ok(Tensor::cat(&rows, 0)?)
    }

    /// Causal forward over a right-padded batch.
    pub fn forward(&self, ctx: &Ctx, inputs: &[MixedInput], use_lora: bool) -> Result<LlmOutput> {
        self.forward_shifted(ctx, inputs, &vec![0; inputs.len()], use_lora)
    }

    /// `forward` with sequence `i` placed at positions `offsets[i]..`.
    pub fn forward_shifted(
        &self,
        ctx: &Ctx,
        inputs: &[MixedInput],
        offsets: &[usize],
        use_lora: bool,
    ) -> Result<LlmOutput> {
        if inputs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if offsets.len() != inputs.len() {
            return Err(Error::InvalidInput(format!("{} offsets for {} inputs", offsets.len(), inputs.len())));
        }
        let lengths: Vec<usize> = inputs.iter().map(MixedInput::len).collect();
        for (&len, &off) in lengths.iter().zip(offsets) {
            if len == 0 {
                return Err(Error::InvalidInput("empty llm input".into()));
            }
            if len + off > self.cfg.max_len {
                return Err(Error::SequenceTooLong { len: len + off, max: self.cfg.max_len });
            }
        }
        let t = *lengths.iter().max().unwrap();
        let table = self.embedding_table(ctx)?;
        let pos = ctx.p(&self.pos);
        let mut seqs = Vec::with_capacity(inputs.len());
        for ((input, &len), &off) in inputs.iter().zip(&lengths).zip(offsets) {
            let e = self.embed_one(&table, input)?;
            let e = (e + pos.narrow(0, off, len)?)?;
            seqs.push(if len < t { e.pad_with_zeros(0, 0, t - len)? } else { e });
        }
        let mut h = Tensor::stack(&seqs, 0)?;
        let mask = causal_mask(t, h.dtype(), h.device())?;
        for block in &self.blocks {
            h = block.forward(ctx, &h, Some(&mask), use_lora)?;
        }
        let hidden = self.ln_f.forward(ctx, &h)?;
        let logits = hidden.broadcast_matmul(&self.output_table(ctx)?.t()?)?;
        Ok(LlmOutput { logits, hidden, lengths })
    }

    /// Final hidden states and logits for `x` (`1 x t x d` embedded rows at
    /// positions `offset..`), reusing and extending `caches`.
    fn step_cached(
        &self,
        ctx: &Ctx,
        x: &Tensor,
        offset: usize,
        caches: &mut [Option<(Tensor, Tensor)>],
        use_lora: bool,
    ) -> Result<(Tensor, Tensor)> {
        let t = x.dims()[1];
        let mut h = x.broadcast_add(&ctx.p(&self.pos).narrow(0, offset, t)?)?;
        for (block, cache) in self.blocks.iter().zip(caches.iter_mut()) {
            h = block.forward_cached(ctx, &h, cache, use_lora)?;
        }
        let hidden = self.ln_f.forward(ctx, &h)?;
        let logits = hidden.broadcast_matmul(&self.output_table(ctx)?.t()?)?;
        Ok((hidden, logits))
    }

    /// Autoregressive decoding with a key/value cache; stops after `eos` or
    /// `max_new` tokens. Hidden states are taken at each generated token's
    /// own position, as in a teacher-forced pass.
    pub fn generate(
        &self,
        prompt: &MixedInput,
        max_new: usize,
        decoding: Decoding,
        use_lora: bool,
        rng: &mut impl Rng,
    ) -> Result<GeneratedStream> {
        if max_new == 0 {
            return Err(Error::InvalidInput("max_new must be at least 1".into()));
        }
        let len = prompt.len();
        if len == 0 {
            return Err(Error::InvalidInput("empty prompt".into()));
        }
        if len >= self.cfg.max_len {
            return Err(Error::SequenceTooLong { len: len + 1, max: self.cfg.max_len });
        }
        let ctx = Ctx::eval();
        let table = self.embedding_table(&ctx)?;
        let mut caches: Vec<Option<(Tensor, Tensor)>> = vec![None; self.blocks.len()];
        let x = self.embed_one(&table, prompt)?.unsqueeze(0)?;
        let (_, logits) = self.step_cached(&ctx, &x, 0, &mut caches, use_lora)?;
        let mut last = logits.get(0)?.get(len - 1)?;
        let mut ids = Vec::new();
        let mut hidden_rows = Vec::new();
        let mut pos = len;
        loop {
            let next = choose_token(&last, decoding, rng)?;
            ids.push(next);
            let x = table.index_select(&Tensor::new(&[next], table.device())?, 0)?.unsqueeze(0)?;
            let (h, logits) = self.step_cached(&ctx, &x, pos, &mut caches, use_lora)?;
            hidden_rows.push(h.get(0)?);
            pos += 1;
            if next == EOS || ids.len() == max_new || pos >= self.cfg.max_len {
                break;
            }
            last = logits.get(0)?.get(0)?;
        }
        Ok(GeneratedStream {
            ids,
            hidden: Tensor::cat(&hidden_rows, 0)?,
        })
    }
}

fn choose_token(logits: &Tensor, decoding: Decoding, rng: &mut impl Rng) -> Result<u32> {
    let values: Vec<f64> = logits.to_dtype(DType::F64)?.to_vec1()?;
    let greedy = || {
        values
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0 as u32
    };
    match decoding {
        Decoding::Greedy => Ok(greedy()),
        Decoding::Temperature(t) if t <= 0.0 => Ok(greedy()),
        Decoding::Temperature(t) => {
            let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = values.iter().map(|v| ((v - max) / t).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    return Ok(i as u32);
                }
                u -= w;
            }
            Ok((weights.len() - 1) as u32)
        }
    }
}

/// Hidden states of each complete signal run, keyed by modality.
pub fn extract_signal_states(
    hidden: &Tensor,
    ids: &[u32],
    vocab: &SignalVocabulary,
) -> Result<(BTreeMap<Modality, Tensor>, Vec<ProtocolViolation>)> {
    if hidden.dims()[0] != ids.len() {
        return Err(Error::InvalidInput(format!(
            "{} hidden states for {} ids",
            hidden.dims()[0],
            ids.len()
        )));
    }
    let scan = scan_signal_runs(ids, vocab);
    let mut out = BTreeMap::new();
    for (m, start) in scan.runs {
        out.insert(m, hidden.narrow(0, start, vocab.count(m))?);
    }
    Ok((out, scan.violations))
}

/// Parameter names updated in `stage`:
/// 1 = input projection; 2 = output projections (with their signal rows);
/// 3 = LoRA + input projection + output projections.
pub fn trainable_mask(store: &ParamStore, stage: u8) -> Result<BTreeSet<String>> {
    let prefixes: &[&str] = match stage {
        1 => &["grouping."],
        2 => &["outproj."],
        3 => &["llm.lora.", "grouping.", "outproj."],
        other => return Err(Error::UnknownStage(other)),
    };
    Ok(store
        .names()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
        .cloned()
        .collect())
}

/// Mean cross-entropy of `targets` under `logits` (`B x T x V`), counting only
/// positions where `weights` is nonzero. Returns `(loss, token_count)`.
pub fn masked_cross_entropy(logits: &Tensor, targets: &[Vec<u32>], weights: &[Vec<f32>]) -> Result<(Tensor, f64)> {
    let (b, t, v) = logits.dims3()?;
    let mut flat_t = Vec::with_capacity(b * t);
    let mut flat_w = Vec::with_capacity(b * t);
    for i in 0..b {
        for j in 0..t {
            flat_t.push(targets[i].get(j).copied().unwrap_or(0));
            flat_w.push(weights[i].get(j).copied().unwrap_or(0.0));
        }
    }
    let count: f64 = flat_w.iter().map(|&w| w as f64).sum();
    let logp = crate::nn::log_softmax_last(&logits.reshape((b * t, v))?)?;
    let idx = Tensor::new(flat_t.as_slice(), logits.device())?.unsqueeze(1)?;
    let picked = logp.gather(&idx, 1)?.squeeze(1)?;
    let w = Tensor::new(flat_w.as_slice(), logits.device())?.to_dtype(logits.dtype())?;
    if count == 0.0 {
        return Ok((Tensor::zeros((), logits.dtype(), logits.device())?, 0.0));
    }
    let loss = (picked.mul(&w)?.sum_all()?.neg()? / count)?;
    Ok((loss, count))
}

/// Argmax over the vocabulary for every position, `B x T`.
pub fn argmax_ids(logits: &Tensor) -> Result<Vec<Vec<u32>>> {
    Ok(logits.argmax(D::Minus1)?.to_vec2::<u32>()?)
}
