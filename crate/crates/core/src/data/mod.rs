//! Synthetic training corpora and their on-disk layout.

pub mod io;
pub mod synth;

pub use io::{Dataset, DatasetManifest};
pub use synth::{
    gen_caption_pairs, gen_mosit_dialogues, wrap_t2m, Attachment, Attributes, CaptionPair, Dialogue,
    DialogueKind, Message, Speaker,
};
