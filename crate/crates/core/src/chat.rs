//! Sequence layout shared by training and inference.
//!
//! ```text
//! [bos] H: what is this? <concepts>\n M: a big red dot, top left[eos]
//!       H: draw a soft low hum\n M: here it is[AUD_0]..[AUD_8][eos]
//! ```
//!
//! Human lines are context only; machine text, signal runs and `[eos]` are
//! prediction targets. Attachments on the human side enter as concept blocks
//! (or, for text-only pretraining, as their gist characters).

use crate::config::Modality;
use crate::data::synth::{Attachment, Dialogue, Speaker};
use crate::error::{Error, Result};
use crate::tokenizer::{tokenize, SignalVocabulary, BOS, EOS};

pub const HUMAN_TAG: &str = "H: ";
pub const MACHINE_TAG: &str = "M: ";
/// Human request used for captioning.
pub const DESCRIBE: &str = "what is this?";

#[derive(Debug, Clone, PartialEq)]
pub enum Span {
    Tokens { ids: Vec<u32>, supervised: bool },
    /// Concept block for input `index`; `len` rows.
    Concepts { index: usize, modality: Modality, len: usize },
}

/// How human-side attachments are fed to the LLM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttachmentMode {
    /// Projected concept block of `len` rows.
    Concepts(usize),
    /// Gist characters of `len` chars, for text-only pretraining.
    Gist(usize),
}

/// A signal run inside a rendered sequence and the attachment it encodes.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSite {
    pub modality: Modality,
    /// Position of the first run token.
    pub start: usize,
    pub attachment: Attachment,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Rendered {
    pub spans: Vec<Span>,
    /// Human-side attachments, indexed by `Span::Concepts::index`.
    pub inputs: Vec<Attachment>,
    pub runs: Vec<RunSite>,
    len: usize,
}

/// Per-position next-token targets with separate text and signal weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub targets: Vec<u32>,
    pub text_weights: Vec<f32>,
    pub signal_weights: Vec<f32>,
}

impl Rendered {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push_ids(&mut self, ids: &[u32], supervised: bool) {
        if ids.is_empty() {
            return;
        }
        self.len += ids.len();
        if let Some(Span::Tokens { ids: last, supervised: s }) = self.spans.last_mut() {
            if *s == supervised {
                last.extend_from_slice(ids);
                return;
            }
        }
        self.spans.push(Span::Tokens { ids: ids.to_vec(), supervised });
    }

    pub fn push_text(&mut self, text: &str, supervised: bool) -> Result<()> {
        self.push_ids(&tokenize(text)?, supervised);
        Ok(())
    }

    pub fn push_concepts(&mut self, modality: Modality, len: usize) -> usize {
        let index = self.spans.iter().filter(|s| matches!(s, Span::Concepts { .. })).count();
        self.spans.push(Span::Concepts { index, modality, len });
        self.len += len;
        index
    }

    fn push_attachment(&mut self, a: &Attachment, mode: AttachmentMode) -> Result<()> {
        match mode {
            AttachmentMode::Concepts(len) => {
                self.push_concepts(a.modality, len);
                self.inputs.push(a.clone());
            }
            AttachmentMode::Gist(len) => self.push_text(&a.attributes.gist(len)?, false)?,
        }
        Ok(())
    }

    fn push_run(&mut self, a: &Attachment, vocab: &SignalVocabulary) {
        self.runs.push(RunSite { modality: a.modality, start: self.len, attachment: a.clone() });
        self.push_ids(&vocab.run(a.modality), true);
    }

    /// Token id per position (`None` under concept blocks).
    pub fn position_ids(&self) -> Vec<Option<u32>> {
        let mut out = Vec::with_capacity(self.len);
        for s in &self.spans {
            match s {
                Span::Tokens { ids, .. } => out.extend(ids.iter().map(|&i| Some(i))),
                Span::Concepts { len, .. } => out.extend(std::iter::repeat(None).take(*len)),
            }
        }
        out
    }

    /// Next-token targets: position `p` predicts the token at `p + 1` when
    /// that token is supervised.
    pub fn targets(&self, vocab: &SignalVocabulary) -> Targets {
        let mut sup = Vec::with_capacity(self.len);
        for s in &self.spans {
            match s {
                Span::Tokens { ids, supervised } => sup.extend(ids.iter().map(|&i| (Some(i), *supervised))),
                Span::Concepts { len, .. } => sup.extend(std::iter::repeat((None, false)).take(*len)),
            }
        }
        let n = self.len;
        let mut t = Targets { targets: vec![0; n], text_weights: vec![0.0; n], signal_weights: vec![0.0; n] };
        for p in 0..n.saturating_sub(1) {
            if let (Some(id), true) = sup[p + 1] {
                t.targets[p] = id;
                if vocab.is_signal(id) {
                    t.signal_weights[p] = 1.0;
                } else {
                    t.text_weights[p] = 1.0;
                }
            }
        }
        t
    }
}

/// Options for rendering dialogues.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderOptions {
    pub attachments: AttachmentMode,
    /// Emit gold signal runs after machine text.
    pub runs: bool,
}

fn push_human(r: &mut Rendered, text: &str, att: Option<&Attachment>, opts: RenderOptions) -> Result<()> {
    r.push_text(HUMAN_TAG, false)?;
    r.push_text(text, false)?;
    if let Some(a) = att {
        r.push_text(" ", false)?;
        r.push_attachment(a, opts.attachments)?;
    }
    r.push_text("\n", false)?;
    r.push_text(MACHINE_TAG, false)
}

/// Whole dialogue with every machine message supervised.
pub fn render_dialogue(d: &Dialogue, vocab: &SignalVocabulary, opts: RenderOptions) -> Result<Rendered> {
    render_until(d, vocab, opts, d.messages.len())
}

/// Context for generating machine message `index`: every earlier message plus
/// the machine tag, nothing supervised.
pub fn render_prompt(d: &Dialogue, index: usize, vocab: &SignalVocabulary, opts: RenderOptions) -> Result<Rendered> {
    match d.messages.get(index) {
        Some(m) if m.speaker == Speaker::Machine => {}
        _ => return Err(Error::InvalidInput(format!("message {index} of {} is not a machine reply", d.id))),
    }
    let mut r = render_until(d, vocab, opts, index)?;
    for s in &mut r.spans {
        if let Span::Tokens { supervised, .. } = s {
            *supervised = false;
        }
    }
    r.runs.clear();
    Ok(r)
}

fn render_until(d: &Dialogue, vocab: &SignalVocabulary, opts: RenderOptions, end: usize) -> Result<Rendered> {
    let mut r = Rendered::default();
    r.push_ids(&[BOS], false);
    for m in &d.messages[..end] {
        match m.speaker {
            Speaker::Human => push_human(&mut r, &m.text, m.attachment.as_ref(), opts)?,
            Speaker::Machine => {
                r.push_text(&m.text, true)?;
                if let (true, Some(a)) = (opts.runs, &m.attachment) {
                    r.push_run(a, vocab);
                }
                r.push_ids(&[EOS], true);
            }
        }
    }
    Ok(r)
}

/// Captioning turn: the attachment is described by the machine.
pub fn render_caption(a: &Attachment, mode: AttachmentMode) -> Result<Rendered> {
    let mut r = Rendered::default();
    r.push_ids(&[BOS], false);
    let opts = RenderOptions { attachments: mode, runs: false };
    push_human(&mut r, DESCRIBE, Some(a), opts)?;
    r.push_text(&a.caption, true)?;
    r.push_ids(&[EOS], true);
    Ok(r)
}

/// Caption as context followed by the gold signal run; only the run is
/// supervised.
pub fn render_signal(a: &Attachment, vocab: &SignalVocabulary) -> Result<Rendered> {
    let mut r = Rendered::default();
    r.push_ids(&[BOS], false);
    r.push_text(&a.caption, false)?;
    r.push_run(a, vocab);
    r.push_ids(&[EOS], false);
    Ok(r)
}

/// Inference prompt for a fresh request with attachments of `modalities`.
pub fn render_request(text: &str, modalities: &[Modality], concept_len: usize) -> Result<Rendered> {
    let mut r = Rendered::default();
    r.push_ids(&[BOS], false);
    r.push_text(HUMAN_TAG, false)?;
    r.push_text(text, false)?;
    for &m in modalities {
        if m == Modality::Text {
            return Err(Error::WrongModality(m));
        }
        r.push_text(" ", false)?;
        r.push_concepts(m, concept_len);
    }
    r.push_text("\n", false)?;
    r.push_text(MACHINE_TAG, false)?;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EncoderConfig, SignalCounts};
    use crate::data::synth::{gen_caption_pairs, gen_mosit_dialogues, wrap_t2m};
    use crate::tokenizer::detokenize;

    fn vocab() -> SignalVocabulary {
        SignalVocabulary::new(SignalCounts::default())
    }

    const CONCEPTS: RenderOptions = RenderOptions { attachments: AttachmentMode::Concepts(4), runs: true };

    #[test]
    fn t2m_layout() {
        let v = vocab();
        let (pairs, _) = gen_caption_pairs(Modality::Image, 1, 0, &EncoderConfig::default()).unwrap();
        let d = wrap_t2m(&pairs[0], 0, 0).unwrap();
        let r = render_dialogue(&d, &v, CONCEPTS).unwrap();
        let ids: Vec<u32> = r.position_ids().into_iter().map(Option::unwrap).collect();
        let text = detokenize(&ids);
        assert_eq!(text, format!("H: draw {}\nM: {}", pairs[0].item.caption, d.messages[1].text));
        assert_eq!(r.runs.len(), 1);
        assert_eq!(&ids[r.runs[0].start..r.runs[0].start + 5], v.run(Modality::Image).as_slice());
        assert_eq!(*ids.last().unwrap(), EOS);
        let t = r.targets(&v);
        assert_eq!(t.signal_weights.iter().sum::<f32>(), 5.0);
        let machine_chars = d.messages[1].text.chars().count() as f32;
        assert_eq!(t.text_weights.iter().sum::<f32>(), machine_chars + 1.0);
    }

    #[test]
    fn concept_blocks_fill_positions() {
        let v = vocab();
        let (ds, _) = gen_mosit_dialogues(5, 3, &EncoderConfig::default()).unwrap();
        for d in &ds {
            let r = render_dialogue(d, &v, CONCEPTS).unwrap();
            let humans = d.messages.iter().filter(|m| m.speaker == Speaker::Human && m.attachment.is_some()).count();
            assert_eq!(r.inputs.len(), humans);
            let none = r.position_ids().iter().filter(|p| p.is_none()).count();
            assert_eq!(none, 4 * humans);
            let machine_runs = d.machine_messages().filter(|m| m.gold_run.is_some()).count();
            assert_eq!(r.runs.len(), machine_runs);
            let t = r.targets(&v);
            assert_eq!(t.targets.len(), r.len());
            for (i, w) in t.text_weights.iter().enumerate() {
                assert!(*w == 0.0 || t.signal_weights[i] == 0.0);
            }
        }
    }

    #[test]
    fn prompt_is_a_prefix_of_the_dialogue() {
        let v = vocab();
        let (ds, _) = gen_mosit_dialogues(3, 9, &EncoderConfig::default()).unwrap();
        let d = &ds[0];
        let full = render_dialogue(d, &v, CONCEPTS).unwrap().position_ids();
        let p = render_prompt(d, 3, &v, CONCEPTS).unwrap();
        assert_eq!(&full[..p.len()], p.position_ids().as_slice());
        assert!(p.targets(&v).text_weights.iter().all(|w| *w == 0.0));
        assert!(render_prompt(d, 2, &v, CONCEPTS).is_err());
    }

    #[test]
    fn gist_mode_is_text_only() {
        let (pairs, _) = gen_caption_pairs(Modality::Audio, 1, 0, &EncoderConfig::default()).unwrap();
        let r = render_caption(&pairs[0].item, AttachmentMode::Gist(4)).unwrap();
        assert!(r.inputs.is_empty());
        let ids: Vec<u32> = r.position_ids().into_iter().map(Option::unwrap).collect();
        let gist = pairs[0].item.attributes.gist(4).unwrap();
        assert!(detokenize(&ids).contains(&format!("{DESCRIBE} {gist}\nM: {}", pairs[0].item.caption)));
    }

    #[test]
    fn signal_sequence_supervises_only_the_run() {
        let v = vocab();
        let (pairs, _) = gen_caption_pairs(Modality::Video, 1, 0, &EncoderConfig::default()).unwrap();
        let r = render_signal(&pairs[0].item, &v).unwrap();
        let t = r.targets(&v);
        assert_eq!(t.signal_weights.iter().sum::<f32>(), 25.0);
        assert_eq!(t.text_weights.iter().sum::<f32>(), 0.0);
        assert_eq!(r.runs[0].start, 1 + pairs[0].item.caption.len());
        let req = render_request("hello", &[Modality::Image], 4).unwrap();
        assert_eq!(req.position_ids().iter().filter(|p| p.is_none()).count(), 4);
        assert!(render_request("x", &[Modality::Text], 4).is_err());
    }
}
