//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use nxgpt::config::Modality;
use nxgpt::llm::GeneratedStream;
use nxgpt::tokenizer::{tokenize, SignalVocabulary};
use rand::seq::SliceRandom;
use rand::Rng;

/// Fresh, empty directory under the system temp dir.
pub fn tmp_dir(label: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("nxgpt-test-{label}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

pub fn stream(ids: Vec<u32>) -> GeneratedStream {
    let n = ids.len();
    GeneratedStream { ids, hidden: Tensor::zeros((n, 2), DType::F32, &Device::Cpu).unwrap() }
}

const WORDS: [&str; 8] = ["sure", "here it is", "ok", "a red dot", "done!", "listen", "  ", "hm, fine."];

/// Test-side inverse of stream parsing: text chunks with one complete run
/// per activated modality, runs in random order.
pub fn emit_stream(decision: &BTreeMap<Modality, bool>, vocab: &SignalVocabulary, rng: &mut impl Rng) -> Vec<u32> {
    let mut runs: Vec<Modality> = decision.iter().filter(|(_, &on)| on).map(|(&m, _)| m).collect();
    runs.shuffle(rng);
    let mut ids = Vec::new();
    for m in runs {
        if rng.gen_bool(0.7) {
            ids.extend(tokenize(WORDS[rng.gen_range(0..WORDS.len())]).unwrap());
        }
        ids.extend(vocab.run(m));
    }
    if rng.gen_bool(0.5) {
        ids.extend(tokenize(WORDS[rng.gen_range(0..WORDS.len())]).unwrap());
    }
    ids
}

pub fn random_decision(rng: &mut impl Rng) -> BTreeMap<Modality, bool> {
    Modality::NON_TEXT.iter().map(|&m| (m, rng.gen_bool(0.5))).collect()
}

/// A malformed stream and the modalities it must leave deactivated.
pub struct Fixture {
    pub name: &'static str,
    pub ids: Vec<u32>,
    pub deactivated: Vec<Modality>,
}

pub fn malformed_fixtures(vocab: &SignalVocabulary) -> Vec<Fixture> {
    let img = vocab.run(Modality::Image);
    let aud = vocab.run(Modality::Audio);
    let vid = vocab.run(Modality::Video);
    let text = |s: &str| tokenize(s).unwrap();
    let cat = |parts: &[&[u32]]| parts.concat();
    vec![
        Fixture { name: "truncated image run", ids: cat(&[&text("ok "), &img[..3]]), deactivated: vec![Modality::Image] },
        Fixture {
            name: "out-of-order image run",
            ids: vec![img[0], img[2], img[1], img[3], img[4]],
            deactivated: vec![Modality::Image],
        },
        Fixture { name: "run starting mid-way", ids: img[2..].to_vec(), deactivated: vec![Modality::Image] },
        Fixture { name: "single stray audio token", ids: cat(&[&text("x"), &aud[4..5], &text("y")]), deactivated: vec![Modality::Audio] },
        Fixture {
            name: "interleaved image and audio",
            ids: vec![img[0], aud[0], img[1], aud[1], img[2], img[3], img[4]],
            deactivated: vec![Modality::Image, Modality::Audio],
        },
        Fixture {
            name: "video run cut by text",
            ids: cat(&[&vid[..10], &text(" and "), &vid[10..]]),
            deactivated: vec![Modality::Video],
        },
        Fixture {
            name: "failed attempt then complete run",
            ids: cat(&[&img[..2], &text(" "), &img]),
            deactivated: vec![Modality::Image],
        },
        Fixture { name: "unknown id", ids: vec![u32::MAX, 1_000_000], deactivated: Modality::NON_TEXT.to_vec() },
        Fixture { name: "duplicated token inside run", ids: vec![img[0], img[1], img[1], img[2], img[3], img[4]], deactivated: vec![Modality::Image] },
        Fixture { name: "run ending the stream early", ids: aud[..8].to_vec(), deactivated: vec![Modality::Audio] },
    ]
}
