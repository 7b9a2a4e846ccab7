//! Character-level tokenizer and the signal-token vocabulary.
//!
//! Id layout: `0` pad, `1` bos, `2` eos, `3..99` the 96 printable symbols
//! (`\n` then ASCII 32..=126), followed by one contiguous id range per
//! non-text modality for its signal tokens (`[IMG_i]`, `[AUD_i]`, `[VID_i]`).

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::config::{Modality, SignalCounts};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
const FIRST_CHAR: u32 = 3;
pub const CHAR_COUNT: u32 = 96;
/// Ids below this are text (specials plus characters).
pub const TEXT_VOCAB: u32 = FIRST_CHAR + CHAR_COUNT;

pub fn char_to_id(c: char) -> Option<u32> {
    match c {
        '\n' => Some(FIRST_CHAR),
        ' '..='~' => Some(FIRST_CHAR + 1 + (c as u32 - ' ' as u32)),
        _ => None,
    }
}

pub fn id_to_char(id: u32) -> Option<char> {
    match id {
        FIRST_CHAR => Some('\n'),
        i if (FIRST_CHAR + 1..TEXT_VOCAB).contains(&i) => char::from_u32(i - FIRST_CHAR - 1 + ' ' as u32),
        _ => None,
    }
}

/// Plain text to ids. Never produces special or signal ids: a literal
/// `"[IMG_0]"` in the input is seven ordinary characters.
pub fn tokenize(text: &str) -> Result<Vec<u32>> {
    text.chars()
        .enumerate()
        .map(|(offset, ch)| char_to_id(ch).ok_or(Error::Tokenize { ch, offset }))
        .collect()
}

/// Text characters of `ids`; special and signal ids are skipped.
pub fn detokenize(ids: &[u32]) -> String {
    ids.iter().filter_map(|&i| id_to_char(i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalVocabulary {
    pub counts: SignalCounts,
}

impl SignalVocabulary {
    pub fn new(counts: SignalCounts) -> Self {
        Self { counts }
    }

    pub fn count(&self, modality: Modality) -> usize {
        self.counts.get(modality)
    }

    /// Contiguous id range of `modality`'s signal tokens (empty for text).
    pub fn range(&self, modality: Modality) -> Range<u32> {
        let mut start = TEXT_VOCAB;
        for m in Modality::NON_TEXT {
            let n = self.counts.get(m) as u32;
            if m == modality {
                return start..start + n;
            }
            start += n;
        }
        TEXT_VOCAB..TEXT_VOCAB
    }

    pub fn vocab_size(&self) -> usize {
        TEXT_VOCAB as usize + Modality::NON_TEXT.iter().map(|&m| self.counts.get(m)).sum::<usize>()
    }

    pub fn id(&self, modality: Modality, index: usize) -> Option<u32> {
        let r = self.range(modality);
        let id = r.start + index as u32;
        r.contains(&id).then_some(id)
    }

    /// The full run `[X_0] .. [X_{k-1}]` for `modality`.
    pub fn run(&self, modality: Modality) -> Vec<u32> {
        self.range(modality).collect()
    }

    pub fn lookup(&self, id: u32) -> Option<(Modality, usize)> {
        Modality::NON_TEXT.into_iter().find_map(|m| {
            let r = self.range(m);
            r.contains(&id).then(|| (m, (id - r.start) as usize))
        })
    }

    pub fn is_signal(&self, id: u32) -> bool {
        id >= TEXT_VOCAB && (id as usize) < self.vocab_size()
    }

    /// Human-readable rendering with specials spelled out.
    pub fn render(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                PAD => out.push_str("<pad>"),
                BOS => out.push_str("<bos>"),
                EOS => out.push_str("<eos>"),
                _ => {
                    if let Some(c) = id_to_char(id) {
                        out.push(c);
                    } else if let Some((m, i)) = self.lookup(id) {
                        out.push_str(&format!("[{}_{i}]", m.signal_prefix().unwrap()));
                    } else {
                        out.push_str(&format!("<unk:{id}>"));
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_simple() {
        let ids = tokenize("a cat").unwrap();
        assert_eq!(ids.len(), 5);
        assert_eq!(detokenize(&ids), "a cat");
        assert!(tokenize("").unwrap().is_empty());
        assert_eq!(detokenize(&[]), "");
    }

    #[test]
    fn literal_signal_spelling_is_plain_text() {
        let vocab = SignalVocabulary::new(SignalCounts::default());
        let ids = tokenize("[IMG_0]").unwrap();
        assert_eq!(ids.len(), 7);
        assert!(ids.iter().all(|&i| !vocab.is_signal(i) && i >= FIRST_CHAR));
    }

    #[test]
    fn unsupported_character_is_an_error() {
        let err = tokenize("caf\u{e9}").unwrap_err();
        assert!(matches!(err, Error::Tokenize { ch: '\u{e9}', offset: 3 }));
    }

    #[test]
    fn ninety_six_symbols() {
        let all: Vec<u32> = (FIRST_CHAR..TEXT_VOCAB).collect();
        let text = detokenize(&all);
        assert_eq!(text.chars().count(), 96);
        assert_eq!(tokenize(&text).unwrap(), all);
    }

    #[test]
    fn signal_ranges_are_disjoint_and_contiguous() {
        let vocab = SignalVocabulary::new(SignalCounts::default());
        let img = vocab.range(Modality::Image);
        let aud = vocab.range(Modality::Audio);
        let vid = vocab.range(Modality::Video);
        assert_eq!(img.start, TEXT_VOCAB);
        assert_eq!((img.len(), aud.len(), vid.len()), (5, 9, 25));
        assert_eq!(img.end, aud.start);
        assert_eq!(aud.end, vid.start);
        assert_eq!(vid.end as usize, vocab.vocab_size());
        assert!(vocab.range(Modality::Text).is_empty());
        assert_eq!(vocab.lookup(aud.start + 3), Some((Modality::Audio, 3)));
        assert_eq!(vocab.render(&vocab.run(Modality::Image)[..2]), "[IMG_0][IMG_1]");
    }

    proptest! {
        #[test]
        fn printable_round_trip(s in "[ -~\n]{0,64}") {
            let ids = tokenize(&s).unwrap();
            prop_assert!(ids.iter().all(|&i| i >= FIRST_CHAR && i < TEXT_VOCAB));
            prop_assert_eq!(detokenize(&ids), s);
        }
    }
}
