//! Seeded synthetic corpora: caption pairs, instruction-wrapped pairs and
//! multi-turn modality-switching dialogues.
//!
//! Every payload is rendered from a small set of discrete attributes plus a
//! continuous latent drawn around the attribute's mixture mode. Captions are a
//! pure function of the attributes.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::blob::Blob;
use crate::config::{EncoderConfig, Modality};
use crate::encoders::{Payload, RawSample};
use crate::error::{Error, Result};
use crate::util::derived_rng;

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const QUADRANTS: [&str; 4] = ["top left", "top right", "bottom left", "bottom right"];
pub const SIZES: [&str; 2] = ["small", "big"];
pub const PITCHES: [&str; 3] = ["low", "mid", "high"];
pub const LOUDNESS: [&str; 2] = ["soft", "loud"];
pub const TIMBRES: [&str; 2] = ["hum", "beep"];
pub const DIRECTIONS: [&str; 4] = ["right", "left", "up", "down"];

/// Spread of latents around their mode.
pub const LATENT_STD: f64 = 0.15;

const RGB: [[f32; 3]; 4] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "modality", rename_all = "lowercase")]
pub enum Attributes {
    Image { color: u8, quadrant: u8, size: u8 },
    Audio { pitch: u8, loudness: u8, timbre: u8 },
    Video { color: u8, direction: u8 },
}

impl Attributes {
    pub fn modality(&self) -> Modality {
        match self {
            Attributes::Image { .. } => Modality::Image,
            Attributes::Audio { .. } => Modality::Audio,
            Attributes::Video { .. } => Modality::Video,
        }
    }

    /// Every attribute combination of `modality`.
    pub fn all(modality: Modality) -> Result<Vec<Attributes>> {
        let mut out = Vec::new();
        match modality {
            Modality::Text => return Err(Error::WrongModality(modality)),
            Modality::Image => {
                for color in 0..4 {
                    for quadrant in 0..4 {
                        for size in 0..2 {
                            out.push(Attributes::Image { color, quadrant, size });
                        }
                    }
                }
            }
            Modality::Audio => {
                for pitch in 0..3 {
                    for loudness in 0..2 {
                        for timbre in 0..2 {
                            out.push(Attributes::Audio { pitch, loudness, timbre });
                        }
                    }
                }
            }
            Modality::Video => {
                for color in 0..4 {
                    for direction in 0..4 {
                        out.push(Attributes::Video { color, direction });
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn sample(modality: Modality, rng: &mut impl Rng) -> Result<Attributes> {
        let all = Attributes::all(modality)?;
        Ok(all[rng.gen_range(0..all.len())])
    }

    pub fn caption(&self) -> String {
        match *self {
            Attributes::Image { color, quadrant, size } => format!(
                "a {} {} dot, {}",
                SIZES[size as usize], COLORS[color as usize], QUADRANTS[quadrant as usize]
            ),
            Attributes::Audio { pitch, loudness, timbre } => format!(
                "a {} {} {}",
                LOUDNESS[loudness as usize], PITCHES[pitch as usize], TIMBRES[timbre as usize]
            ),
            Attributes::Video { color, direction } => {
                format!("a {} dot moving {}", COLORS[color as usize], DIRECTIONS[direction as usize])
            }
        }
    }

    /// Compact text stand-in for a projected attachment: a modality letter
    /// followed by one letter per attribute, padded with `.` to `len`.
    pub fn gist(&self, len: usize) -> Result<String> {
        let base: [char; 4] = match *self {
            Attributes::Image { color, quadrant, size } => [
                'I',
                ['r', 'g', 'b', 'y'][color as usize],
                ['1', '2', '3', '4'][quadrant as usize],
                ['s', 'B'][size as usize],
            ],
            Attributes::Audio { pitch, loudness, timbre } => [
                'A',
                ['l', 'm', 'h'][pitch as usize],
                ['q', 'L'][loudness as usize],
                ['~', '#'][timbre as usize],
            ],
            Attributes::Video { color, direction } => [
                'V',
                ['r', 'g', 'b', 'y'][color as usize],
                ['>', '<', '^', 'v'][direction as usize],
                '.',
            ],
        };
        if len < base.len() {
            return Err(Error::Config(format!(
                "attachment gist needs at least {} concept tokens, the grouping emits {len}",
                base.len()
            )));
        }
        let mut s: String = base.iter().collect();
        s.extend(std::iter::repeat('.').take(len - base.len()));
        Ok(s)
    }

    /// Mixture mode of the latent: a quadrant centre, a pitch level, or a
    /// start and end position.
    pub fn mode_center(&self) -> Vec<f32> {
        match *self {
            Attributes::Image { quadrant, .. } => {
                let x = if quadrant % 2 == 0 { -1.0 } else { 1.0 };
                let y = if quadrant < 2 { 1.0 } else { -1.0 };
                vec![x, y]
            }
            Attributes::Audio { pitch, .. } => vec![pitch as f32 - 1.0],
            Attributes::Video { direction, .. } => match direction {
                0 => vec![-1.0, 0.0, 1.0, 0.0],
                1 => vec![1.0, 0.0, -1.0, 0.0],
                2 => vec![0.0, -1.0, 0.0, 1.0],
                _ => vec![0.0, 1.0, 0.0, -1.0],
            },
        }
    }

    pub fn sample_latent(&self, rng: &mut impl Rng) -> Vec<f32> {
        let noise = Normal::new(0.0, LATENT_STD).expect("valid std");
        self.mode_center()
            .into_iter()
            .map(|c| c + noise.sample(rng) as f32)
            .collect()
    }

    /// Index of the latent mode this attribute set belongs to.
    pub fn mode_index(&self) -> usize {
        match *self {
            Attributes::Image { quadrant, .. } => quadrant as usize,
            Attributes::Audio { pitch, .. } => pitch as usize,
            Attributes::Video { direction, .. } => direction as usize,
        }
    }

    pub fn color(&self) -> Option<u8> {
        match *self {
            Attributes::Image { color, .. } | Attributes::Video { color, .. } => Some(color),
            Attributes::Audio { .. } => None,
        }
    }
}

/// All mixture modes of `modality`, indexed like [`Attributes::mode_index`].
pub fn mode_centers(modality: Modality) -> Result<Vec<Vec<f32>>> {
    let mut seen = BTreeMap::new();
    for a in Attributes::all(modality)? {
        seen.entry(a.mode_index()).or_insert_with(|| a.mode_center());
    }
    Ok(seen.into_values().collect())
}

fn splat(frame: &mut [f32], h: usize, w: usize, c: usize, cx: f32, cy: f32, sigma: f32, rgb: [f32; 3]) {
    for r in 0..h {
        for col in 0..w {
            let dx = col as f32 + 0.5 - cx;
            let dy = r as f32 + 0.5 - cy;
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            for ch in 0..c {
                frame[(r * w + col) * c + ch] = (rgb[ch % 3] * v).clamp(0.0, 1.0);
            }
        }
    }
}

/// Map a latent coordinate in roughly `[-2, 2]` to pixel units.
fn to_pixel(v: f32, size: usize) -> f32 {
    (v + 2.0) / 4.0 * size as f32
}

/// Render the raw payload for `attrs` at `latent`.
pub fn render(attrs: &Attributes, latent: &[f32], cfg: &EncoderConfig) -> RawSample {
    match *attrs {
        Attributes::Image { color, size, .. } => {
            let (h, w, c) = (cfg.image_size, cfg.image_size, cfg.image_channels);
            let mut data = vec![0.0; h * w * c];
            let sigma = if size == 1 { 0.125 } else { 0.0625 } * h as f32;
            splat(&mut data, h, w, c, to_pixel(latent[0], w), to_pixel(-latent[1], h), sigma, RGB[color as usize]);
            RawSample::new(Payload::Image { height: h, width: w, channels: c, data })
        }
        Attributes::Audio { loudness, timbre, .. } => {
            let n = cfg.audio_frames * cfg.audio_frame_len;
            let amp = if loudness == 1 { 0.8 } else { 0.3 };
            let cycles = 6.0 * 2f32.powf(latent[0]);
            let data = (0..n)
                .map(|i| {
                    let s = (std::f32::consts::TAU * cycles * i as f32 / n as f32).sin();
                    amp * if timbre == 1 { s.signum() } else { s }
                })
                .collect();
            RawSample::new(Payload::Audio { frames: cfg.audio_frames, frame_len: cfg.audio_frame_len, data })
        }
        Attributes::Video { color, .. } => {
            let (f, s, c) = (cfg.video_frames, cfg.video_size, cfg.image_channels);
            let frame = s * s * c;
            let mut data = vec![0.0; f * frame];
            for k in 0..f {
                let t = if f == 1 { 0.0 } else { k as f32 / (f - 1) as f32 };
                let x = latent[0] + t * (latent[2] - latent[0]);
                let y = latent[1] + t * (latent[3] - latent[1]);
                splat(
                    &mut data[k * frame..(k + 1) * frame],
                    s,
                    s,
                    c,
                    to_pixel(x, s),
                    to_pixel(-y, s),
                    0.125 * s as f32,
                    RGB[color as usize],
                );
            }
            RawSample::new(Payload::Video { frames: f, height: s, width: s, channels: c, data })
        }
    }
}

/// A generated attachment: attributes, latent, caption and its payload blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attachment {
    pub modality: Modality,
    pub attributes: Attributes,
    pub latent: Vec<f32>,
    pub caption: String,
    /// Blob path relative to the dataset directory.
    pub blob: String,
}

impl Attachment {
    pub fn payload(&self, blobs: &BTreeMap<String, Blob>) -> Result<RawSample> {
        let blob = blobs
            .get(&self.blob)
            .ok_or_else(|| Error::DanglingRef(format!("payload {} is not in the dataset", self.blob)))?;
        RawSample::from_blob(self.modality, &blob.shape, blob.data.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub id: String,
    #[serde(flatten)]
    pub item: Attachment,
}

/// Payload blob shape for `sample`.
fn to_blob(sample: &RawSample) -> Result<Blob> {
    Blob::new(sample.shape(), sample.data().to_vec())
}

fn make_attachment(
    attrs: Attributes,
    rng: &mut impl Rng,
    cfg: &EncoderConfig,
    blob_name: String,
    blobs: &mut BTreeMap<String, Blob>,
) -> Result<Attachment> {
    let latent = attrs.sample_latent(rng);
    let sample = render(&attrs, &latent, cfg);
    blobs.insert(blob_name.clone(), to_blob(&sample)?);
    Ok(Attachment {
        modality: attrs.modality(),
        attributes: attrs,
        latent,
        caption: attrs.caption(),
        blob: blob_name,
    })
}

/// `n` seeded caption pairs for one modality. Blobs are named
/// `blobs/{modality}_{index}.blob`.
pub fn gen_caption_pairs(
    modality: Modality,
    n: usize,
    seed: u64,
    cfg: &EncoderConfig,
) -> Result<(Vec<CaptionPair>, BTreeMap<String, Blob>)> {
    if modality == Modality::Text {
        return Err(Error::WrongModality(modality));
    }
    if n == 0 {
        return Err(Error::InvalidInput("need at least one caption pair".into()));
    }
    let mut rng = derived_rng(seed, &format!("pairs.{modality}"));
    let mut blobs = BTreeMap::new();
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let attrs = Attributes::sample(modality, &mut rng)?;
        let id = format!("{modality}_{i:05}");
        let item = make_attachment(attrs, &mut rng, cfg, format!("blobs/{id}.blob"), &mut blobs)?;
        pairs.push(CaptionPair { id, item });
    }
    Ok((pairs, blobs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Human,
    Machine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attachment: Option<Attachment>,
    /// Modality whose signal run the machine must emit after `text`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_run: Option<Modality>,
}

impl Message {
    fn human(text: String, attachment: Option<Attachment>) -> Self {
        Self { speaker: Speaker::Human, text, attachment, gold_run: None }
    }

    fn machine(text: String, attachment: Option<Attachment>) -> Self {
        let gold_run = attachment.as_ref().map(|a| a.modality);
        Self { speaker: Speaker::Machine, text, attachment, gold_run }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DialogueKind {
    /// One instruction-wrapped caption pair.
    T2m,
    /// Multi-turn modality switching.
    Mosit,
}

/// Messages alternate human, machine, ...; a turn is one human message and
/// the machine reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub kind: DialogueKind,
    pub topic: u32,
    pub messages: Vec<Message>,
}

pub const MIN_TURNS: usize = 3;
pub const MAX_TURNS: usize = 7;

impl Dialogue {
    pub fn turn_count(&self) -> usize {
        self.messages.len() / 2
    }

    pub fn machine_messages(&self) -> impl Iterator<Item = &Message> {
        self.messages.iter().filter(|m| m.speaker == Speaker::Machine)
    }

    /// Non-text modalities attached anywhere in the dialogue.
    pub fn modalities(&self) -> BTreeSet<Modality> {
        self.messages
            .iter()
            .filter_map(|m| m.attachment.as_ref().map(|a| a.modality))
            .collect()
    }

    /// Check the schema: alternation, turn counts per kind, run annotations
    /// and machine-side captions.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Dialogue(format!("{}: {msg}", self.id)));
        if self.messages.len() % 2 != 0 {
            return fail("every human message needs a machine reply".into());
        }
        for (i, m) in self.messages.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::Human } else { Speaker::Machine };
            if m.speaker != expected {
                return fail(format!("message {i} should come from the {expected:?} side"));
            }
            match m.speaker {
                Speaker::Human if m.gold_run.is_some() => {
                    return fail(format!("human message {i} carries a signal run"));
                }
                Speaker::Machine if m.gold_run != m.attachment.as_ref().map(|a| a.modality) => {
                    return fail(format!("machine message {i} run disagrees with its attachment"));
                }
                _ => {}
            }
            if let Some(a) = &m.attachment {
                if a.modality == Modality::Text || a.caption.is_empty() {
                    return fail(format!("message {i} has an attachment without a caption"));
                }
            }
        }
        let turns = self.turn_count();
        match self.kind {
            DialogueKind::T2m if turns != 1 => fail(format!("instruction pair has {turns} turns")),
            DialogueKind::Mosit if !(MIN_TURNS..=MAX_TURNS).contains(&turns) => {
                fail(format!("{turns} turns outside {MIN_TURNS}..={MAX_TURNS}"))
            }
            _ => Ok(()),
        }
    }
}

pub const T2M_TEMPLATES: [[&str; 3]; 3] = [
    ["draw {c}", "show me {c}", "i want a picture of {c}"],
    ["play {c}", "let me hear {c}", "make the sound of {c}"],
    ["animate {c}", "make a clip of {c}", "show a video of {c}"],
];
pub const ACKS: [&str; 3] = ["here it is", "sure", "done"];

/// Wrap a caption pair into a one-turn generation request.
pub fn wrap_t2m(pair: &CaptionPair, template: usize, seed: u64) -> Result<Dialogue> {
    let slot = pair
        .item
        .modality
        .slot()
        .ok_or(Error::WrongModality(pair.item.modality))?;
    let tpl = T2M_TEMPLATES[slot]
        .get(template)
        .ok_or_else(|| Error::InvalidInput(format!("unknown instruction template {template}")))?;
    let mut rng = derived_rng(seed, &format!("t2m.{}", pair.id));
    let ack = ACKS[rng.gen_range(0..ACKS.len())];
    Ok(Dialogue {
        id: format!("t2m_{}", pair.id),
        kind: DialogueKind::T2m,
        topic: 0,
        messages: vec![
            Message::human(tpl.replace("{c}", &pair.item.caption), None),
            Message::machine(ack.to_string(), Some(pair.item.clone())),
        ],
    })
}

/// Request verb that asks for a `modality` output.
pub fn request_verb(modality: Modality) -> &'static str {
    match modality {
        Modality::Image => "draw",
        Modality::Audio => "play",
        _ => "animate",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TurnKind {
    Describe(Modality),
    Generate(Modality),
    /// Image in, video of the same colour out.
    ImageToVideo,
    /// Video in, image of the same colour out.
    VideoToImage,
    Chat,
}

fn pick_turn(rng: &mut impl Rng) -> TurnKind {
    let m = Modality::NON_TEXT[rng.gen_range(0..3)];
    match rng.gen_range(0..10) {
        0..=2 => TurnKind::Generate(m),
        3..=4 => TurnKind::Describe(m),
        5 => TurnKind::ImageToVideo,
        6 => TurnKind::VideoToImage,
        7 => TurnKind::Generate(m),
        _ => TurnKind::Chat,
    }
}

const CHAT: [(&str, &str); 3] = [("thanks", "you are welcome"), ("nice", "glad you like it"), ("hello", "hi, how can i help?")];

struct Builder<'a> {
    cfg: &'a EncoderConfig,
    blobs: &'a mut BTreeMap<String, Blob>,
    prefix: String,
    counter: usize,
}

impl Builder<'_> {
    fn attach(&mut self, attrs: Attributes, rng: &mut impl Rng) -> Result<Attachment> {
        let name = format!("blobs/{}_{}.blob", self.prefix, self.counter);
        self.counter += 1;
        make_attachment(attrs, rng, self.cfg, name, self.blobs)
    }

    fn turn(&mut self, kind: TurnKind, rng: &mut impl Rng) -> Result<[Message; 2]> {
        Ok(match kind {
            TurnKind::Describe(m) => {
                let a = self.attach(Attributes::sample(m, rng)?, rng)?;
                let caption = a.caption.clone();
                [Message::human("what is this?".into(), Some(a)), Message::machine(caption, None)]
            }
            TurnKind::Generate(m) => {
                let a = self.attach(Attributes::sample(m, rng)?, rng)?;
                let text = format!("{} {}", request_verb(m), a.caption);
                [Message::human(text, None), Message::machine(ACKS[0].into(), Some(a))]
            }
            TurnKind::ImageToVideo => {
                let src = Attributes::sample(Modality::Image, rng)?;
                let direction = rng.gen_range(0..4u8);
                let out = Attributes::Video { color: src.color().unwrap_or(0), direction };
                let a_in = self.attach(src, rng)?;
                let a_out = self.attach(out, rng)?;
                let text = format!("animate it moving {}", DIRECTIONS[direction as usize]);
                [Message::human(text, Some(a_in)), Message::machine(ACKS[0].into(), Some(a_out))]
            }
            TurnKind::VideoToImage => {
                let src = Attributes::sample(Modality::Video, rng)?;
                let (quadrant, size) = (rng.gen_range(0..4u8), rng.gen_range(0..2u8));
                let out = Attributes::Image { color: src.color().unwrap_or(0), quadrant, size };
                let a_in = self.attach(src, rng)?;
                let a_out = self.attach(out, rng)?;
                let text = format!("draw it {}, {}", SIZES[size as usize], QUADRANTS[quadrant as usize]);
                [Message::human(text, Some(a_in)), Message::machine(ACKS[0].into(), Some(a_out))]
            }
            TurnKind::Chat => {
                let (h, m) = CHAT[rng.gen_range(0..CHAT.len())];
                [Message::human(h.into(), None), Message::machine(m.into(), None)]
            }
        })
    }
}

/// Upper bound on the rendered token length of a dialogue: characters plus
/// `concept_tokens` per human attachment plus the signal runs.
pub fn rendered_len(d: &Dialogue, concept_tokens: usize, signal_count: impl Fn(Modality) -> usize) -> usize {
    let mut n = 1;
    for m in &d.messages {
        n += 3 + m.text.chars().count() + 1;
        if let Some(a) = &m.attachment {
            n += match m.speaker {
                Speaker::Human => concept_tokens + 1,
                Speaker::Machine => signal_count(a.modality),
            };
        }
    }
    n
}

/// Longest dialogue the generator emits, in rendered tokens.
pub const MAX_DIALOGUE_TOKENS: usize = 400;

/// `n` modality-switching dialogues. Each has 3..=7 turns, at least two
/// distinct non-text modalities and at least one machine-side attachment.
pub fn gen_mosit_dialogues(
    n: usize,
    seed: u64,
    cfg: &EncoderConfig,
) -> Result<(Vec<Dialogue>, BTreeMap<String, Blob>)> {
    if n == 0 {
        return Err(Error::InvalidInput("need at least one dialogue".into()));
    }
    let mut blobs = BTreeMap::new();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = derived_rng(seed, &format!("mosit.{i}"));
        let id = format!("mosit_{i:05}");
        // Resample until the constraints hold; attempts are seeded so the
        // result is deterministic.
        for attempt in 0.. {
            let mut local = BTreeMap::new();
            let mut b = Builder { cfg, blobs: &mut local, prefix: format!("{id}_{attempt}"), counter: 0 };
            let turns = rng.gen_range(MIN_TURNS..=MAX_TURNS);
            let mut kinds: Vec<TurnKind> = (0..turns).map(|_| pick_turn(&mut rng)).collect();
            kinds.shuffle(&mut rng);
            let mut messages = Vec::with_capacity(2 * turns);
            for k in kinds {
                messages.extend(b.turn(k, &mut rng)?);
            }
            let d = Dialogue { id: id.clone(), kind: DialogueKind::Mosit, topic: rng.gen_range(0..100), messages };
            let machine_attached = d.machine_messages().any(|m| m.attachment.is_some());
            let fits = rendered_len(&d, 8, |m| [5, 9, 25][m.slot().unwrap_or(0)]) <= MAX_DIALOGUE_TOKENS;
            if d.modalities().len() >= 2 && machine_attached && fits {
                d.validate()?;
                blobs.extend(local);
                out.push(d);
                break;
            }
        }
    }
    Ok((out, blobs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> EncoderConfig {
        EncoderConfig::default()
    }

    #[test]
    fn same_seed_same_pairs() {
        let a = gen_caption_pairs(Modality::Image, 6, 3, &cfg()).unwrap();
        let b = gen_caption_pairs(Modality::Image, 6, 3, &cfg()).unwrap();
        assert_eq!(a, b);
        let c = gen_caption_pairs(Modality::Image, 6, 4, &cfg()).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn one_pair_one_blob() {
        let (pairs, blobs) = gen_caption_pairs(Modality::Audio, 1, 0, &cfg()).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(blobs.len(), 1);
        assert!(blobs.contains_key(&pairs[0].item.blob));
        assert!(gen_caption_pairs(Modality::Text, 1, 0, &cfg()).is_err());
        assert!(gen_caption_pairs(Modality::Audio, 0, 0, &cfg()).is_err());
    }

    #[test]
    fn captions_regenerate_from_attributes() {
        for m in Modality::NON_TEXT {
            let (pairs, blobs) = gen_caption_pairs(m, 20, 1, &cfg()).unwrap();
            for p in pairs {
                assert_eq!(p.item.attributes.caption(), p.item.caption);
                let payload = p.item.payload(&blobs).unwrap();
                assert_eq!(payload, render(&p.item.attributes, &p.item.latent, &cfg()));
                payload.validate(&cfg()).unwrap();
            }
        }
    }

    #[test]
    fn captions_are_distinct_per_attribute_set() {
        for m in Modality::NON_TEXT {
            let all = Attributes::all(m).unwrap();
            let captions: BTreeSet<String> = all.iter().map(Attributes::caption).collect();
            let gists: BTreeSet<String> = all.iter().map(|a| a.gist(4).unwrap()).collect();
            assert_eq!(captions.len(), all.len());
            assert_eq!(gists.len(), all.len());
        }
        let img = Attributes::Image { color: 0, quadrant: 0, size: 1 };
        assert_eq!(img.caption(), "a big red dot, top left");
        assert_eq!(img.gist(6).unwrap(), "Ir1B..");
        assert!(img.gist(3).is_err());
    }

    #[test]
    fn blob_brightest_pixel_follows_latent() {
        let a = Attributes::Image { color: 2, quadrant: 1, size: 0 };
        let s = render(&a, &a.mode_center(), &cfg());
        let data = s.data();
        let (best, _) = (0..256)
            .map(|p| (p, data[p * 3 + 2]))
            .fold((0, f32::MIN), |b, x| if x.1 > b.1 { x } else { b });
        let (row, col) = (best / 16, best % 16);
        assert!(row < 8 && col >= 8, "top right expected, got {row},{col}");
    }

    #[test]
    fn t2m_wrapping() {
        let (pairs, _) = gen_caption_pairs(Modality::Image, 2, 0, &cfg()).unwrap();
        let d = wrap_t2m(&pairs[0], 0, 7).unwrap();
        d.validate().unwrap();
        assert_eq!(d.turn_count(), 1);
        assert!(d.messages[0].text.contains(&pairs[0].item.caption));
        assert_eq!(d.messages[1].gold_run, Some(Modality::Image));
        assert_eq!(d, wrap_t2m(&pairs[0], 0, 7).unwrap());
        assert!(wrap_t2m(&pairs[0], 3, 7).is_err());
        let (audio, _) = gen_caption_pairs(Modality::Audio, 1, 0, &cfg()).unwrap();
        assert_eq!(wrap_t2m(&audio[0], 2, 0).unwrap().messages[1].gold_run, Some(Modality::Audio));
    }

    #[test]
    fn mosit_invariants_and_coverage() {
        let (ds, blobs) = gen_mosit_dialogues(100, 11, &cfg()).unwrap();
        let mut seen = BTreeSet::new();
        for d in &ds {
            d.validate().unwrap();
            assert!((MIN_TURNS..=MAX_TURNS).contains(&d.turn_count()));
            assert!(d.modalities().len() >= 2);
            assert!(d.machine_messages().any(|m| m.attachment.is_some()));
            for m in &d.messages {
                if let Some(a) = &m.attachment {
                    assert!(blobs.contains_key(&a.blob));
                }
            }
            seen.extend(d.modalities());
        }
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn schema_rejects_bad_dialogues() {
        let (mut ds, _) = gen_mosit_dialogues(1, 2, &cfg()).unwrap();
        let mut d = ds.remove(0);
        let mut swapped = d.clone();
        swapped.messages.swap(0, 1);
        assert!(matches!(swapped.validate(), Err(Error::Dialogue(_))));
        d.messages.truncate(4);
        assert!(d.validate().is_err());
    }

    proptest! {
        #[test]
        fn latents_stay_near_their_mode(seed in 0u64..500) {
            let mut rng = derived_rng(seed, "latent");
            for m in Modality::NON_TEXT {
                let a = Attributes::sample(m, &mut rng).unwrap();
                let z = a.sample_latent(&mut rng);
                let c = a.mode_center();
                let d2: f32 = z.iter().zip(&c).map(|(x, y)| (x - y).powi(2)).sum();
                prop_assert!(d2.sqrt() < 8.0 * LATENT_STD as f32);
            }
        }
    }
}
