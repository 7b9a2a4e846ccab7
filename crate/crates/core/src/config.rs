//! Model configuration shared by every component, plus validation.
//!
//! Configuration files are TOML. Every table rejects unknown keys so a typo
//! fails loudly instead of silently falling back to a default.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Audio,
    Video,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::Text,
        Modality::Image,
        Modality::Audio,
        Modality::Video,
    ];

    /// The three modalities that have encoders, signal tokens and decoders.
    pub const NON_TEXT: [Modality; 3] = [Modality::Image, Modality::Audio, Modality::Video];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Audio => "audio",
            Modality::Video => "video",
        }
    }

    /// Prefix used when spelling signal tokens, e.g. `IMG` in `[IMG_3]`.
    pub fn signal_prefix(self) -> Option<&'static str> {
        match self {
            Modality::Text => None,
            Modality::Image => Some("IMG"),
            Modality::Audio => Some("AUD"),
            Modality::Video => Some("VID"),
        }
    }

    /// Position among [`Modality::NON_TEXT`].
    pub fn slot(self) -> Option<usize> {
        match self {
            Modality::Text => None,
            Modality::Image => Some(0),
            Modality::Audio => Some(1),
            Modality::Video => Some(2),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            "audio" => Ok(Modality::Audio),
            "video" => Ok(Modality::Video),
            other => Err(Error::InvalidInput(format!("unknown modality {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Width `d` of the patch features handed to the input projection.
    pub feature_dim: usize,
    pub image_size: usize,
    pub image_channels: usize,
    pub patch: usize,
    pub audio_frames: usize,
    pub audio_frame_len: usize,
    pub video_frames: usize,
    pub video_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            image_size: 16,
            image_channels: 3,
            patch: 4,
            audio_frames: 8,
            audio_frame_len: 16,
            video_frames: 2,
            video_size: 8,
        }
    }
}

impl EncoderConfig {
    /// Number of patch tokens the encoder produces for `modality`.
    pub fn token_count(&self, modality: Modality) -> usize {
        match modality {
            Modality::Text => 0,
            Modality::Image => (self.image_size / self.patch).pow(2),
            Modality::Audio => self.audio_frames,
            Modality::Video => self.video_frames * (self.video_size / self.patch).pow(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupingConfig {
    /// Concept counts `M_1..M_L`; the number of stages is the length.
    pub stage_sizes: Vec<usize>,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            stage_sizes: vec![8, 4],
            heads: 4,
            mlp_hidden: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub max_len: usize,
    pub mlp_ratio: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            dim: 64,
            max_len: 512,
            mlp_ratio: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignalCounts {
    pub text: usize,
    pub image: usize,
    pub audio: usize,
    pub video: usize,
}

impl Default for SignalCounts {
    fn default() -> Self {
        Self {
            text: 0,
            image: 5,
            audio: 9,
            video: 25,
        }
    }
}

impl SignalCounts {
    pub fn uniform(count: usize) -> Self {
        Self {
            text: 0,
            image: count,
            audio: count,
            video: count,
        }
    }

    pub fn get(&self, modality: Modality) -> usize {
        match modality {
            Modality::Text => self.text,
            Modality::Image => self.image,
            Modality::Audio => self.audio,
            Modality::Video => self.video,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutProjConfig {
    pub hidden: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dropout: f64,
    /// Conditioner sequence length `Q`.
    pub queries: usize,
    /// Conditioner width `d_c`.
    pub cond_dim: usize,
}

impl Default for OutProjConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            dropout: 0.1,
            queries: 8,
            cond_dim: 32,
        }
    }
}

impl OutProjConfig {
    /// Full-size profile: hidden 512, 4 heads, 4 encoder and 4 decoder layers.
    pub fn paper() -> Self {
        Self {
            hidden: 512,
            heads: 4,
            enc_layers: 4,
            dec_layers: 4,
            dropout: 0.1,
            queries: 77,
            cond_dim: 768,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Weight matrices of every LLM layer that receive an adapter.
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            targets: LoraTarget::ALL.to_vec(),
        }
    }
}

/// Adaptable matrix inside one transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Q,
    K,
    V,
    O,
    Fc1,
    Fc2,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 6] = [Self::Q, Self::K, Self::V, Self::O, Self::Fc1, Self::Fc2];

    pub fn name(self) -> &'static str {
        match self {
            Self::Q => "q",
            Self::K => "k",
            Self::V => "v",
            Self::O => "o",
            Self::Fc1 => "fc1",
            Self::Fc2 => "fc2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: usize,
    pub layers: usize,
    pub time_dim: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            hidden: 128,
            layers: 3,
            time_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub grouping: GroupingConfig,
    pub llm: LlmConfig,
    pub signals: SignalCounts,
    pub outproj: OutProjConfig,
    pub lora: LoraConfig,
    pub diffusion: DiffusionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: EncoderConfig::default(),
            grouping: GroupingConfig::default(),
            llm: LlmConfig::default(),
            signals: SignalCounts::default(),
            outproj: OutProjConfig::default(),
            lora: LoraConfig::default(),
            diffusion: DiffusionConfig::default(),
        }
    }
}

impl ModelConfig {
    /// The desk profile used by tests, examples and the CLI.
    pub fn desk() -> Self {
        Self::default()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Stable hash of the serialized config, used in run headers.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::util::hex_sha256(&json)
    }

    pub fn signal_count(&self, modality: Modality) -> usize {
        self.signals.get(modality)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, field: &'static str, message: impl Into<String>) {
        self.violations.push(Violation {
            field,
            message: message.into(),
        });
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            return Ok(());
        }
        let joined = self
            .violations
            .iter()
            .map(|v| format!("{}: {}", v.field, v.message))
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::Config(joined))
    }
}

/// Check every configuration invariant. Violations are returned as data.
pub fn validate_config(cfg: &ModelConfig) -> ValidationReport {
    let mut report = ValidationReport::default();
    let enc = &cfg.encoder;
    for (field, value) in [
        ("encoder.feature_dim", enc.feature_dim),
        ("encoder.image_size", enc.image_size),
        ("encoder.image_channels", enc.image_channels),
        ("encoder.patch", enc.patch),
        ("encoder.audio_frames", enc.audio_frames),
        ("encoder.audio_frame_len", enc.audio_frame_len),
        ("encoder.video_frames", enc.video_frames),
        ("encoder.video_size", enc.video_size),
        ("grouping.heads", cfg.grouping.heads),
        ("grouping.mlp_hidden", cfg.grouping.mlp_hidden),
        ("llm.layers", cfg.llm.layers),
        ("llm.heads", cfg.llm.heads),
        ("llm.dim", cfg.llm.dim),
        ("llm.max_len", cfg.llm.max_len),
        ("llm.mlp_ratio", cfg.llm.mlp_ratio),
        ("outproj.hidden", cfg.outproj.hidden),
        ("outproj.heads", cfg.outproj.heads),
        ("outproj.enc_layers", cfg.outproj.enc_layers),
        ("outproj.dec_layers", cfg.outproj.dec_layers),
        ("outproj.queries", cfg.outproj.queries),
        ("outproj.cond_dim", cfg.outproj.cond_dim),
        ("lora.rank", cfg.lora.rank),
        ("diffusion.steps", cfg.diffusion.steps),
        ("diffusion.hidden", cfg.diffusion.hidden),
        ("diffusion.layers", cfg.diffusion.layers),
        ("diffusion.time_dim", cfg.diffusion.time_dim),
    ] {
        if value == 0 {
            report.push(field, "must be positive");
        }
    }
    if enc.patch > 0 {
        if enc.image_size % enc.patch != 0 {
            report.push("encoder.patch", "must divide image_size");
        }
        if enc.video_size % enc.patch != 0 {
            report.push("encoder.patch", "must divide video_size");
        }
    }
    if enc.patch > enc.image_size || enc.patch > enc.video_size {
        report.push("encoder.patch", "larger than the frame");
    }

    let sizes = &cfg.grouping.stage_sizes;
    if sizes.is_empty() {
        report.push("grouping.stage_sizes", "need at least one grouping stage");
    }
    if sizes.iter().any(|&m| m == 0) {
        report.push("grouping.stage_sizes", "every stage needs at least one concept");
    }
    if sizes.windows(2).any(|w| w[1] >= w[0]) {
        report.push("grouping.stage_sizes", "stage sizes must decrease");
    }

    for (field, dim, heads) in [
        ("grouping.heads", enc.feature_dim, cfg.grouping.heads),
        ("llm.heads", cfg.llm.dim, cfg.llm.heads),
        ("outproj.heads", cfg.outproj.hidden, cfg.outproj.heads),
    ] {
        if heads > 0 && dim % heads != 0 {
            report.push(field, "must divide the model width");
        }
    }

    if cfg.signals.text != 0 {
        report.push("signals.text", "text has no signal tokens");
    }
    for m in Modality::NON_TEXT {
        if cfg.signals.get(m) == 0 {
            report.push(
                match m {
                    Modality::Image => "signals.image",
                    Modality::Audio => "signals.audio",
                    _ => "signals.video",
                },
                "needs at least one signal token",
            );
        }
    }
    let total_signals = cfg.signals.image + cfg.signals.audio + cfg.signals.video;
    if total_signals + 2 > cfg.llm.max_len {
        report.push("llm.max_len", "too short for the signal runs");
    }

    let dropout = cfg.outproj.dropout;
    if !(0.0..1.0).contains(&dropout) {
        report.push("outproj.dropout", "dropout must lie in [0, 1)");
    }
    let mut targets = cfg.lora.targets.clone();
    targets.sort_unstable();
    targets.dedup();
    if targets.is_empty() || targets.len() != cfg.lora.targets.len() {
        report.push("lora.targets", "must list at least one matrix, each once");
    }
    if !(cfg.lora.alpha.is_finite() && cfg.lora.alpha > 0.0) {
        report.push("lora.alpha", "must be positive");
    }
    let d = &cfg.diffusion;
    if !(d.beta_start > 0.0 && d.beta_end < 1.0 && d.beta_start <= d.beta_end) {
        report.push("diffusion.beta_start", "need 0 < beta_start <= beta_end < 1");
    }
    report
}
