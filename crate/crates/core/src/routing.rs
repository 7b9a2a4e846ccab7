//! Inference-time routing: scan a generated stream for signal runs, decide
//! which decoders to activate, and dispatch projected signal states.
//!
//! A modality is activated iff the first signal token of that modality in
//! the stream opens a complete contiguous run `[X_0] .. [X_{k-1}]`. Anything
//! else involving its signal tokens is recorded as a violation; violations
//! never abort parsing.

use std::collections::BTreeMap;
use std::ops::Range;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::Modality;
use crate::error::{Error, Result};
use crate::llm::GeneratedStream;
use crate::tokenizer::{detokenize, SignalVocabulary};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViolationKind {
    /// A run started at index 0 but stopped after `got` of `expected` tokens.
    Incomplete { got: usize, expected: usize },
    /// A signal token that neither continues the open run nor starts a new one.
    OutOfOrder { index: usize },
    /// A complete run after the modality's first run; ignored.
    Repeated,
    /// A run that is complete but follows an earlier failed attempt.
    AfterFailure,
    /// An id beyond the vocabulary.
    UnknownId { id: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolViolation {
    /// `None` only for unknown ids.
    pub modality: Option<Modality>,
    /// Stream position of the offending token (run start for run-level kinds).
    pub position: usize,
    #[serde(flatten)]
    pub kind: ViolationKind,
}

/// Run starts of activated modalities plus every violation, in stream order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SignalScan {
    pub runs: BTreeMap<Modality, usize>,
    pub violations: Vec<ProtocolViolation>,
}

#[derive(Default)]
struct ScanState {
    open: Option<(Modality, usize, usize)>,
    /// Modalities whose first attempt has been decided (true = activated).
    decided: BTreeMap<Modality, bool>,
    scan: SignalScan,
}

impl ScanState {
    fn close(&mut self, vocab: &SignalVocabulary) {
        if let Some((m, start, next)) = self.open.take() {
            self.decided.entry(m).or_insert(false);
            self.scan.violations.push(ProtocolViolation {
                modality: Some(m),
                position: start,
                kind: ViolationKind::Incomplete { got: next, expected: vocab.count(m) },
            });
        }
    }

    fn complete(&mut self, m: Modality, start: usize) {
        match self.decided.get(&m) {
            None => {
                self.decided.insert(m, true);
                self.scan.runs.insert(m, start);
            }
            Some(&activated) => self.scan.violations.push(ProtocolViolation {
                modality: Some(m),
                position: start,
                kind: if activated { ViolationKind::Repeated } else { ViolationKind::AfterFailure },
            }),
        }
    }
}

/// Walk `ids` once and locate signal runs.
pub fn scan_signal_runs(ids: &[u32], vocab: &SignalVocabulary) -> SignalScan {
    let vocab_size = vocab.vocab_size() as u32;
    let mut st = ScanState::default();
    for (pos, &id) in ids.iter().enumerate() {
        if id >= vocab_size {
            st.close(vocab);
            st.scan.violations.push(ProtocolViolation {
                modality: None,
                position: pos,
                kind: ViolationKind::UnknownId { id },
            });
            continue;
        }
        let Some((m, index)) = vocab.lookup(id) else {
            st.close(vocab);
            continue;
        };
        if let Some((om, start, next)) = st.open {
            if om == m && index == next {
                if next + 1 == vocab.count(m) {
                    st.open = None;
                    st.complete(m, start);
                } else {
                    st.open = Some((m, start, next + 1));
                }
                continue;
            }
            st.close(vocab);
        }
        if index == 0 {
            if vocab.count(m) == 1 {
                st.complete(m, pos);
            } else {
                st.open = Some((m, pos, 1));
            }
        } else {
            st.decided.entry(m).or_insert(false);
            st.scan.violations.push(ProtocolViolation {
                modality: Some(m),
                position: pos,
                kind: ViolationKind::OutOfOrder { index },
            });
        }
    }
    st.close(vocab);
    st.scan
}

#[derive(Debug, Clone)]
pub enum ModalityRoute {
    /// Complete run at `span`; `states` are the run's hidden vectors (`k x d`).
    Activated { span: Range<usize>, states: Tensor },
    Deactivated,
}

impl ModalityRoute {
    pub fn is_activated(&self) -> bool {
        matches!(self, ModalityRoute::Activated { .. })
    }
}

#[derive(Debug, Clone)]
pub struct RoutingDecision {
    /// Detokenized non-signal tokens, trimmed.
    pub text: String,
    /// One entry per non-text modality.
    pub routes: BTreeMap<Modality, ModalityRoute>,
    pub violations: Vec<ProtocolViolation>,
}

impl RoutingDecision {
    pub fn activated(&self) -> Vec<Modality> {
        self.routes
            .iter()
            .filter(|(_, r)| r.is_activated())
            .map(|(&m, _)| m)
            .collect()
    }

    pub fn activation_map(&self) -> BTreeMap<Modality, bool> {
        self.routes.iter().map(|(&m, r)| (m, r.is_activated())).collect()
    }
}

/// Split a generated stream into text and per-modality routes.
pub fn parse_stream(stream: &GeneratedStream, vocab: &SignalVocabulary) -> Result<RoutingDecision> {
    let rows = stream.hidden.dims().first().copied().unwrap_or(0);
    if rows != stream.ids.len() {
        return Err(Error::InvalidInput(format!(
            "stream has {} ids but {rows} hidden states",
            stream.ids.len()
        )));
    }
    let scan = scan_signal_runs(&stream.ids, vocab);
    let mut routes = BTreeMap::new();
    for m in Modality::NON_TEXT {
        let route = match scan.runs.get(&m) {
            Some(&start) => {
                let k = vocab.count(m);
                ModalityRoute::Activated {
                    span: start..start + k,
                    states: stream.hidden.narrow(0, start, k)?,
                }
            }
            None => ModalityRoute::Deactivated,
        };
        routes.insert(m, route);
    }
    Ok(RoutingDecision {
        text: detokenize(&stream.ids).trim().to_string(),
        routes,
        violations: scan.violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SignalCounts;
    use crate::tokenizer::{tokenize, EOS};
    use candle_core::{DType, Device};

    fn vocab() -> SignalVocabulary {
        SignalVocabulary::new(SignalCounts::default())
    }

    fn stream(ids: Vec<u32>) -> GeneratedStream {
        let n = ids.len();
        GeneratedStream {
            ids,
            hidden: Tensor::arange(0f32, n as f32, &Device::Cpu)
                .unwrap()
                .reshape((n, 1))
                .unwrap(),
        }
    }

    #[test]
    fn image_run_activates_image_only() {
        let v = vocab();
        let mut ids = tokenize("sure! ").unwrap();
        ids.extend(v.run(Modality::Image));
        ids.push(EOS);
        let d = parse_stream(&stream(ids), &v).unwrap();
        assert_eq!(d.text, "sure!");
        assert_eq!(d.activated(), vec![Modality::Image]);
        assert!(d.violations.is_empty());
        match &d.routes[&Modality::Image] {
            ModalityRoute::Activated { span, states } => {
                assert_eq!(span.clone(), 6..11);
                assert_eq!(states.dims(), &[5, 1]);
            }
            ModalityRoute::Deactivated => panic!("image should be active"),
        }
    }

    #[test]
    fn plain_text_deactivates_everything() {
        let v = vocab();
        let d = parse_stream(&stream(tokenize("just words").unwrap()), &v).unwrap();
        assert!(d.activated().is_empty());
        assert!(d.violations.is_empty());
        assert_eq!(d.routes.len(), 3);
    }

    #[test]
    fn out_of_order_run_is_a_violation() {
        let v = vocab();
        let img = v.run(Modality::Image);
        let ids = vec![img[0], img[2], img[1], img[3], img[4]];
        let d = parse_stream(&stream(ids), &v).unwrap();
        assert!(!d.routes[&Modality::Image].is_activated());
        assert!(d
            .violations
            .iter()
            .any(|x| matches!(x.kind, ViolationKind::OutOfOrder { index: 2 })));
    }

    #[test]
    fn truncated_run_is_incomplete() {
        let v = vocab();
        let aud = v.run(Modality::Audio);
        let mut ids = aud[..4].to_vec();
        ids.extend(tokenize("x").unwrap());
        let scan = scan_signal_runs(&ids, &v);
        assert!(scan.runs.is_empty());
        assert_eq!(
            scan.violations,
            vec![ProtocolViolation {
                modality: Some(Modality::Audio),
                position: 0,
                kind: ViolationKind::Incomplete { got: 4, expected: 9 },
            }]
        );
    }

    #[test]
    fn only_first_run_counts() {
        let v = vocab();
        let mut ids = v.run(Modality::Image);
        ids.extend(v.run(Modality::Audio));
        ids.extend(v.run(Modality::Image));
        let scan = scan_signal_runs(&ids, &v);
        assert_eq!(scan.runs[&Modality::Image], 0);
        assert_eq!(scan.runs[&Modality::Audio], 5);
        assert_eq!(scan.violations.len(), 1);
        assert_eq!(scan.violations[0].kind, ViolationKind::Repeated);
        assert_eq!(scan.violations[0].position, 14);
    }

    #[test]
    fn failed_first_attempt_blocks_later_run() {
        let v = vocab();
        let img = v.run(Modality::Image);
        let mut ids = img[..2].to_vec();
        ids.extend(img.iter().copied());
        let scan = scan_signal_runs(&ids, &v);
        assert!(scan.runs.is_empty());
        let kinds: Vec<_> = scan.violations.iter().map(|x| x.kind.clone()).collect();
        assert_eq!(kinds, vec![ViolationKind::Incomplete { got: 2, expected: 5 }, ViolationKind::AfterFailure]);
    }

    #[test]
    fn unknown_ids_and_length_mismatch() {
        let v = vocab();
        let scan = scan_signal_runs(&[9999], &v);
        assert_eq!(scan.violations[0].kind, ViolationKind::UnknownId { id: 9999 });
        let bad = GeneratedStream {
            ids: vec![5, 6],
            hidden: Tensor::zeros((1, 4), DType::F32, &Device::Cpu).unwrap(),
        };
        assert!(parse_stream(&bad, &v).is_err());
    }

    #[test]
    fn single_token_runs() {
        let v = SignalVocabulary::new(SignalCounts::uniform(1));
        let ids = vec![v.run(Modality::Video)[0]];
        let scan = scan_signal_runs(&ids, &v);
        assert_eq!(scan.runs[&Modality::Video], 0);
        assert!(scan.violations.is_empty());
    }

    #[test]
    fn violation_serializes_flat() {
        let v = ProtocolViolation {
            modality: Some(Modality::Image),
            position: 3,
            kind: ViolationKind::OutOfOrder { index: 2 },
        };
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"{"modality":"image","position":3,"kind":"out_of_order","index":2}"#);
    }
}
