//! Frozen toy encoders: seeded linear patch embedders plus a fixed
//! positional code, one per non-text modality. They stand in for a large
//! pretrained multimodal encoder; only the projection after them learns.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::budget::Role;
use crate::config::{EncoderConfig, Modality};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Ctx, Param, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    /// `height x width x channels`, values in `[0, 1]`.
    Image { height: usize, width: usize, channels: usize, data: Vec<f32> },
    /// `frames x frame_len` samples.
    Audio { frames: usize, frame_len: usize, data: Vec<f32> },
    /// `frames x height x width x channels`.
    Video { frames: usize, height: usize, width: usize, channels: usize, data: Vec<f32> },
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub payload: Payload,
}

impl RawSample {
    pub fn new(payload: Payload) -> Self {
        Self { payload }
    }

    pub fn modality(&self) -> Modality {
        match self.payload {
            Payload::Image { .. } => Modality::Image,
            Payload::Audio { .. } => Modality::Audio,
            Payload::Video { .. } => Modality::Video,
            Payload::Text(_) => Modality::Text,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match &self.payload {
            Payload::Image { height, width, channels, .. } => vec![*height, *width, *channels],
            Payload::Audio { frames, frame_len, .. } => vec![*frames, *frame_len],
            Payload::Video { frames, height, width, channels, .. } => vec![*frames, *height, *width, *channels],
            Payload::Text(s) => vec![s.len()],
        }
    }

    pub fn data(&self) -> &[f32] {
        match &self.payload {
            Payload::Image { data, .. } | Payload::Audio { data, .. } | Payload::Video { data, .. } => data,
            Payload::Text(_) => &[],
        }
    }

    /// Rebuild a sample from a stored blob shape; rank decides the modality.
    pub fn from_blob(modality: Modality, shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let payload = match (modality, shape) {
            (Modality::Image, &[height, width, channels]) => Payload::Image { height, width, channels, data },
            (Modality::Audio, &[frames, frame_len]) => Payload::Audio { frames, frame_len, data },
            (Modality::Video, &[frames, height, width, channels]) => {
                Payload::Video { frames, height, width, channels, data }
            }
            _ => {
                return Err(Error::InvalidInput(format!(
                    "shape {shape:?} is not a {modality} payload"
                )))
            }
        };
        Ok(Self { payload })
    }

    /// Check finiteness and that the dims match the encoder configuration.
    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        let modality = self.modality();
        let expected = match modality {
            Modality::Text => return Err(Error::WrongModality(Modality::Text)),
            Modality::Image => vec![cfg.image_size, cfg.image_size, cfg.image_channels],
            Modality::Audio => vec![cfg.audio_frames, cfg.audio_frame_len],
            Modality::Video => vec![cfg.video_frames, cfg.video_size, cfg.video_size, cfg.image_channels],
        };
        let shape = self.shape();
        if shape != expected {
            return Err(Error::InvalidInput(format!(
                "{modality} payload has dims {shape:?}, expected {expected:?}"
            )));
        }
        if self.data().len() != shape.iter().product::<usize>() {
            return Err(Error::InvalidInput(format!("{modality} payload length disagrees with dims")));
        }
        if !self.data().iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(format!("{modality} payload has non-finite values")));
        }
        Ok(())
    }
}

/// Patch-level features `X*` for one input: `N x d`.
#[derive(Debug, Clone)]
pub struct ModalityFeatureBlock {
    pub modality: Modality,
    pub features: Tensor,
}

impl ModalityFeatureBlock {
    pub fn token_count(&self) -> usize {
        self.features.dims()[0]
    }
}

/// Cut an `h x w x c` frame into row-major `p x p` patches, each flattened
/// row-major within the patch.
fn image_patches(data: &[f32], h: usize, w: usize, c: usize, p: usize, out: &mut Vec<f32>) {
    for py in 0..h / p {
        for px in 0..w / p {
            for y in 0..p {
                for x in 0..p {
                    let base = ((py * p + y) * w + px * p + x) * c;
                    out.extend_from_slice(&data[base..base + c]);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct PatchEmbedder {
    proj: Linear,
    pos: Param,
}

#[derive(Debug, Clone)]
pub struct ToyEncoders {
    cfg: EncoderConfig,
    image: PatchEmbedder,
    audio: PatchEmbedder,
    video: PatchEmbedder,
}

impl ToyEncoders {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.feature_dim;
        let patch_dim = cfg.patch * cfg.patch * cfg.image_channels;
        let mut make = |name: &str, d_in: usize, tokens: usize| -> Result<PatchEmbedder> {
            Ok(PatchEmbedder {
                proj: Linear::new(store, &format!("encoder.{name}.proj"), d_in, d, Role::Frozen)?,
                pos: store.normal(&format!("encoder.{name}.pos"), &[tokens, d], 0.5, Role::Frozen)?,
            })
        };
        Ok(Self {
            image: make("image", patch_dim, cfg.token_count(Modality::Image))?,
            audio: make("audio", cfg.audio_frame_len, cfg.token_count(Modality::Audio))?,
            video: make("video", patch_dim, cfg.token_count(Modality::Video))?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Patch matrix `N x patch_dim` for a validated sample.
    fn patches(&self, sample: &RawSample) -> (usize, usize, Vec<f32>) {
        let p = self.cfg.patch;
        let mut out = Vec::new();
        match &sample.payload {
            Payload::Image { height, width, channels, data } => {
                image_patches(data, *height, *width, *channels, p, &mut out);
                ((height / p) * (width / p), p * p * channels, out)
            }
            Payload::Audio { frames, frame_len, data } => (*frames, *frame_len, data.clone()),
            Payload::Video { frames, height, width, channels, data } => {
                let frame = height * width * channels;
                for f in 0..*frames {
                    image_patches(&data[f * frame..(f + 1) * frame], *height, *width, *channels, p, &mut out);
                }
                (frames * (height / p) * (width / p), p * p * channels, out)
            }
            Payload::Text(_) => unreachable!("validated"),
        }
    }

    /// Encode one sample into patch features. Deterministic; weights frozen.
    pub fn encode(&self, sample: &RawSample, store: &ParamStore) -> Result<ModalityFeatureBlock> {
        sample.validate(&self.cfg)?;
        let modality = sample.modality();
        let embedder = match modality {
            Modality::Image => &self.image,
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
            Modality::Text => unreachable!("validated"),
        };
        let (n, dim, data) = self.patches(sample);
        let x = Tensor::from_vec(data, (n, dim), store.device())?.to_dtype(store.dtype())?;
        let ctx = Ctx::eval();
        let features = embedder.proj.forward(&ctx, &x)?.broadcast_add(&ctx.p(&embedder.pos))?;
        Ok(ModalityFeatureBlock { modality, features })
    }
}
